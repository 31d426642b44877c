//! HTTP service hosting an [`Endpoints`] set on the wire protocol.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;

use super::wire::{self, Envelope, ErrorBody, ErrorInfo, Message, VersionInfo};
use super::{Endpoints, GenError, Role, PROTOCOL_VERSION};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Version reported by the service and stamped on responses.
    pub protocol_version: String,
    /// Corrupt one pixel outside the mask of every inpainting result.
    pub adversarial: bool,
    /// Fixed reply for prompt expansion instead of the served expander.
    pub expander_reply: Option<String>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION.to_string(),
            adversarial: false,
            expander_reply: None,
        }
    }
}

struct AppState {
    endpoints: Endpoints,
    options: ServerOptions,
    blobs: Mutex<HashMap<String, Vec<u8>>>,
}

type Shared = Arc<AppState>;

fn error_response(
    state: &AppState,
    request_id: &str,
    status: StatusCode,
    e: &GenError,
) -> Response {
    let body = ErrorBody {
        protocol_version: state.options.protocol_version.clone(),
        request_id: request_id.to_string(),
        error: ErrorInfo {
            kind: wire::error_kind(e).to_string(),
            message: e.to_string(),
        },
    };
    (status, Json(body)).into_response()
}

async fn version(State(state): State<Shared>) -> Json<VersionInfo> {
    Json(VersionInfo {
        protocol_version: state.options.protocol_version.clone(),
        roles: Role::ALL.iter().map(|r| r.as_str().to_string()).collect(),
    })
}

async fn put_blob(State(state): State<Shared>, Path(hash): Path<String>, body: Bytes) -> Response {
    if wire::content_hash(&body) != hash {
        return error_response(
            &state,
            "",
            StatusCode::BAD_REQUEST,
            &GenError::Protocol("blob content does not match its hash".into()),
        );
    }
    state
        .blobs
        .lock()
        .expect("blob store")
        .insert(hash, body.to_vec());
    StatusCode::NO_CONTENT.into_response()
}

async fn get_blob(State(state): State<Shared>, Path(hash): Path<String>) -> Response {
    match state.blobs.lock().expect("blob store").get(&hash) {
        Some(b) => (StatusCode::OK, b.clone()).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn call(
    State(state): State<Shared>,
    Path(role): Path<String>,
    Json(env): Json<Envelope>,
) -> Response {
    let id = env.request_id.clone();
    let Some(role) = Role::parse(&role) else {
        return error_response(
            &state,
            &id,
            StatusCode::NOT_FOUND,
            &GenError::Unsupported(format!("unknown role {role:?}")),
        );
    };
    if let Err(e) = wire::check_version(&env.protocol_version) {
        return error_response(&state, &id, StatusCode::BAD_REQUEST, &e);
    }
    let mut msg = Message::new(env.params.clone());
    {
        let blobs = state.blobs.lock().expect("blob store");
        for a in &env.attachments {
            match blobs.get(&a.content_hash) {
                Some(b) => msg.attach(a.name.clone(), a.encoding, b.clone()),
                None => {
                    let e = GenError::Protocol(format!("attachment {:?} was not uploaded", a.name));
                    return error_response(&state, &id, StatusCode::BAD_REQUEST, &e);
                }
            }
        }
    }
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || dispatch(&worker, role, &msg)).await;
    let reply = match result {
        Ok(Ok(reply)) => reply,
        Ok(Err(e)) => return error_response(&state, &id, StatusCode::UNPROCESSABLE_ENTITY, &e),
        Err(e) => {
            return error_response(
                &state,
                &id,
                StatusCode::INTERNAL_SERVER_ERROR,
                &GenError::Transport(e.to_string()),
            )
        }
    };
    let env = reply.envelope(&id, &state.options.protocol_version);
    {
        let mut blobs = state.blobs.lock().expect("blob store");
        for (name, _, bytes) in reply.blobs {
            let hash = env
                .attachments
                .iter()
                .find(|a| a.name == name)
                .expect("attachment listed")
                .content_hash
                .clone();
            blobs.insert(hash, bytes);
        }
    }
    Json(env).into_response()
}

fn dispatch(state: &AppState, role: Role, msg: &Message) -> Result<Message, GenError> {
    let ep = &state.endpoints;
    match role {
        Role::PromptExpander => {
            let reply = match &state.options.expander_reply {
                Some(r) => r.clone(),
                None => {
                    let seed: String = msg.param("seed_prompt")?;
                    ep.expander
                        .expand(&seed, msg.param("width")?, msg.param("height")?)?
                        .to_json()
                }
            };
            Ok(Message::new(json!({ "reply": reply })))
        }
        Role::Inpainter2d => {
            let req = wire::decode_inpaint_request(msg)?;
            let mut out = ep.inpainter.inpaint(&req)?;
            if state.options.adversarial {
                if let Some((x, y)) = (0..out.pixels.height())
                    .flat_map(|y| (0..out.pixels.width()).map(move |x| (x, y)))
                    .find(|(x, y)| !req.mask.get(*x, *y))
                {
                    let p = out.pixels.get_pixel_mut(x, y);
                    p[0] = p[0].wrapping_add(64);
                }
            }
            Ok(wire::frame_message(&out))
        }
        Role::ImageTo3d => {
            let (prompt, seed, attempt) = wire::decode_image_to_3d_request(msg)?;
            wire::image_3d_response(&ep.image_to_3d.image_to_3d(&prompt, seed, attempt)?)
        }
        Role::LatentDenoiser => match msg.param::<String>("op")?.as_str() {
            "step" => wire::denoise_response(
                &ep.denoiser
                    .denoise_step(&wire::decode_denoise_request(msg)?)?,
            ),
            "decode" => Ok(wire::splats_message(
                &ep.denoiser.decode(&wire::decode_decode_request(msg)?)?,
            )),
            other => Err(GenError::Unsupported(format!(
                "latent-denoiser op {other:?}"
            ))),
        },
        Role::BackgroundRemoval => {
            let img = wire::decode_frame_message(msg)?;
            Ok(wire::image_message(&ep.background.remove(&img)?))
        }
        Role::ImageDistance => {
            let (a, b) = wire::decode_distance_request(msg)?;
            Ok(Message::new(
                json!({ "distance": ep.distance.distance(&a, &b)? }),
            ))
        }
    }
}

pub fn router(endpoints: Endpoints, options: ServerOptions) -> Router {
    let state = Arc::new(AppState {
        endpoints,
        options,
        blobs: Mutex::new(HashMap::new()),
    });
    Router::new()
        .route("/v1/version", get(version))
        .route("/v1/blobs/{hash}", put(put_blob).get(get_blob))
        .route("/v1/{role}", post(call))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

/// A service running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

/// Binds `bind` (e.g. `127.0.0.1:0`) and serves on a background thread.
pub fn spawn(
    endpoints: Endpoints,
    options: ServerOptions,
    bind: &str,
) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(endpoints, options);
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until the process is stopped.
pub fn serve_blocking(
    endpoints: Endpoints,
    options: ServerOptions,
    bind: &str,
) -> std::io::Result<()> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    log::info!(
        "serving protocol {} on {}",
        options.protocol_version,
        listener.local_addr()?
    );
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, router(endpoints, options)).await
    })
}
