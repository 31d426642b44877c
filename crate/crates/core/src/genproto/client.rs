//! Blocking HTTP client implementing every generator role against a remote
//! service.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use image::RgbaImage;

use super::wire::{self, Envelope, ErrorBody, Message, VersionInfo};
use super::{
    BackgroundRemoval, DenoiseRequest, GenError, Image3DResult, ImageDistance, ImageTo3d,
    Inpainter, LatentDenoiser, PromptExpander, Role, PROTOCOL_VERSION,
};
use crate::framing2d::{InpaintRequest, TileImagePrompt};
use crate::isorender::{FrameKind, FramedImage};
use crate::latentops::{DenoiseStep, SparseLatentVolume};
use crate::splat::SplatSet;
use crate::worldspec::{parse_world_spec, WorldSpec};

/// Largest per-channel difference tolerated outside the inpainting mask.
pub const OUTSIDE_MASK_TOLERANCE: u8 = 1;

const EXAMPLE_SPEC: &str = r#"{"tiles": [
{ "prompt": "ancient stone bridge over a stream", "x": 0, "y": 0 },
{ "prompt": "lively stream past mossy banks", "x": 1, "y": 0 },
{ "prompt": "serene pond reflecting moonlight", "x": 0, "y": 1 },
{ "prompt": "bustling medieval market street", "x": 1, "y": 1 } ],
"prompt": "{tile_prompt}, medieval setting, isometric view, glowing lanterns, soft shading, vibrant colors, detailed textures"}"#;

/// Instruction sent to a remote language model for prompt expansion.
pub fn expansion_instruction(seed_prompt: &str, width: u32, height: u32) -> String {
    format!(
        "Design a {width}x{height} grid of square map tiles for a 3D world themed \"{seed_prompt}\". \
         Reply with JSON only. Give each tile a short description of what stands on it, with x from 0 to {} \
         and y from 0 to {}, and make neighbouring tiles fit together. Add a shared style prompt under \
         \"prompt\" that contains {{tile_prompt}} exactly once. Follow the format of this example:\n{EXAMPLE_SPEC}",
        width - 1,
        height - 1
    )
}

#[derive(Debug)]
pub struct RemoteClient {
    base: String,
    agent: ureq::Agent,
    max_retries: u32,
    next_id: AtomicU64,
    handshake: OnceLock<Result<(), GenError>>,
}

impl RemoteClient {
    pub fn new(base_url: &str, timeout: Duration, max_retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            max_retries,
            next_id: AtomicU64::new(0),
            handshake: OnceLock::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Protocol version reported by the service.
    pub fn server_version(&self) -> Result<VersionInfo, GenError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/version", self.base))
            .call()
            .map_err(transport)?;
        if resp.status() != 200 {
            return Err(GenError::Remote {
                status: resp.status().as_u16(),
                message: "version query failed".into(),
            });
        }
        let body = resp.body_mut().read_to_vec().map_err(transport)?;
        serde_json::from_slice(&body).map_err(|e| GenError::Protocol(format!("version reply: {e}")))
    }

    fn ensure_version(&self) -> Result<(), GenError> {
        self.handshake
            .get_or_init(|| wire::check_version(&self.server_version()?.protocol_version))
            .clone()
    }

    fn upload(&self, hash: &str, bytes: &[u8]) -> Result<(), GenError> {
        let resp = self
            .agent
            .put(format!("{}/v1/blobs/{hash}", self.base))
            .send(bytes)
            .map_err(transport)?;
        match resp.status().as_u16() {
            200..=299 => Ok(()),
            s => Err(GenError::Remote {
                status: s,
                message: format!("blob upload {hash} rejected"),
            }),
        }
    }

    fn download(&self, hash: &str) -> Result<Vec<u8>, GenError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/blobs/{hash}", self.base))
            .call()
            .map_err(transport)?;
        if resp.status() != 200 {
            return Err(GenError::Protocol(format!(
                "blob {hash} unavailable ({})",
                resp.status()
            )));
        }
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(transport)?;
        if wire::content_hash(&bytes) != hash {
            return Err(GenError::Protocol(format!(
                "blob {hash} failed its hash check"
            )));
        }
        Ok(bytes)
    }

    fn call_once(&self, role: Role, msg: &Message, id: &str) -> Result<Message, GenError> {
        let env = msg.envelope(id, PROTOCOL_VERSION);
        for ((_, _, bytes), a) in msg.blobs.iter().zip(&env.attachments) {
            self.upload(&a.content_hash, bytes)?;
        }
        let body = serde_json::to_vec(&env).expect("serializable envelope");
        let mut resp = self
            .agent
            .post(format!("{}/v1/{}", self.base, role.as_str()))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let raw = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(transport)?;
        if status != 200 {
            return Err(match serde_json::from_slice::<ErrorBody>(&raw) {
                Ok(err) if err.error.kind == "version" => GenError::Version {
                    expected: PROTOCOL_VERSION.into(),
                    got: err.protocol_version,
                },
                Ok(err) => GenError::Remote {
                    status,
                    message: format!("{}: {}", err.error.kind, err.error.message),
                },
                Err(_) => GenError::Remote {
                    status,
                    message: String::from_utf8_lossy(&raw).into_owned(),
                },
            });
        }
        let reply: Envelope = serde_json::from_slice(&raw)
            .map_err(|e| GenError::Protocol(format!("response envelope: {e}")))?;
        wire::check_version(&reply.protocol_version)?;
        if reply.request_id != id {
            return Err(GenError::Protocol(format!(
                "response id {:?} does not match {id:?}",
                reply.request_id
            )));
        }
        let mut out = Message::new(reply.params);
        for a in &reply.attachments {
            out.attach(a.name.clone(), a.encoding, self.download(&a.content_hash)?);
        }
        Ok(out)
    }

    /// One protocol round trip; transport failures are retried.
    pub fn call(&self, role: Role, msg: &Message) -> Result<Message, GenError> {
        self.ensure_version()?;
        let id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut attempt = 0;
        loop {
            match self.call_once(role, msg, &id) {
                Err(GenError::Transport(m)) if attempt < self.max_retries => {
                    log::warn!("{role} transport failure, retrying: {m}");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Inpainting result exactly as returned, without the contract check.
    pub fn inpaint_unchecked(&self, req: &InpaintRequest) -> Result<FramedImage, GenError> {
        wire::decode_frame_message(&self.call(Role::Inpainter2d, &wire::inpaint_request(req))?)
    }
}

fn transport(e: ureq::Error) -> GenError {
    GenError::Transport(e.to_string())
}

/// Verifies that `out` equals the base image outside the mask within
/// [`OUTSIDE_MASK_TOLERANCE`].
pub fn check_outside_mask(req: &InpaintRequest, out: &RgbaImage) -> Result<(), GenError> {
    let base = &req.base.pixels;
    if out.dimensions() != base.dimensions() {
        return Err(GenError::Protocol(format!(
            "inpainting changed size {:?} -> {:?}",
            base.dimensions(),
            out.dimensions()
        )));
    }
    for (x, y, p) in out.enumerate_pixels() {
        if req.mask.get(x, y) {
            continue;
        }
        let b = base.get_pixel(x, y);
        if (0..4).any(|k| p[k].abs_diff(b[k]) > OUTSIDE_MASK_TOLERANCE) {
            return Err(GenError::Protocol(format!(
                "pixel ({x}, {y}) outside the mask changed from {:?} to {:?}",
                b.0, p.0
            )));
        }
    }
    Ok(())
}

impl PromptExpander for RemoteClient {
    fn expand(&self, seed_prompt: &str, width: u32, height: u32) -> Result<WorldSpec, GenError> {
        if width == 0 || height == 0 {
            return Err(GenError::Param(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        let instruction = expansion_instruction(seed_prompt, width, height);
        let reply: String = self
            .call(
                Role::PromptExpander,
                &wire::expand_request(seed_prompt, width, height, &instruction),
            )?
            .param("reply")?;
        parse_world_spec(reply.as_bytes()).map_err(|e| GenError::Expansion {
            message: e.to_string(),
            raw: reply,
        })
    }
}

impl Inpainter for RemoteClient {
    fn inpaint(&self, req: &InpaintRequest) -> Result<FramedImage, GenError> {
        let out = self.inpaint_unchecked(req)?;
        check_outside_mask(req, &out.pixels)?;
        Ok(FramedImage {
            kind: FrameKind::InpaintResult,
            ..out
        })
    }
}

impl ImageTo3d for RemoteClient {
    fn image_to_3d(
        &self,
        prompt: &TileImagePrompt,
        seed: u64,
        attempt: u32,
    ) -> Result<Image3DResult, GenError> {
        wire::decode_image_3d_response(&self.call(
            Role::ImageTo3d,
            &wire::image_to_3d_request(prompt, seed, attempt),
        )?)
    }
}

impl LatentDenoiser for RemoteClient {
    fn denoise_step(&self, req: &DenoiseRequest) -> Result<DenoiseStep, GenError> {
        let out = wire::decode_denoise_response(
            &self.call(Role::LatentDenoiser, &wire::denoise_request(req)?)?,
        )?;
        if !out.latents.same_cells(&req.latents) || out.latents.channels() != req.latents.channels()
        {
            return Err(GenError::Shape("denoiser changed the latent layout".into()));
        }
        if !out.latents.all_finite() {
            return Err(GenError::Shape(
                "denoiser returned non-finite features".into(),
            ));
        }
        if out
            .weights
            .as_ref()
            .is_some_and(|w| w.len() != req.latents.len())
        {
            return Err(GenError::Shape(
                "weight count does not match the cell count".into(),
            ));
        }
        Ok(out)
    }

    fn decode(&self, latents: &SparseLatentVolume) -> Result<SplatSet, GenError> {
        let splats = wire::decode_splats_message(
            &self.call(Role::LatentDenoiser, &wire::decode_request(latents)?)?,
        )?;
        splats
            .validate()
            .map_err(|e| GenError::Shape(e.to_string()))?;
        Ok(splats)
    }
}

impl BackgroundRemoval for RemoteClient {
    fn remove(&self, image: &FramedImage) -> Result<RgbaImage, GenError> {
        wire::decode_image_message(
            &self.call(Role::BackgroundRemoval, &wire::frame_message(image))?,
        )
    }
}

impl ImageDistance for RemoteClient {
    fn distance(&self, a: &RgbaImage, b: &RgbaImage) -> Result<f64, GenError> {
        let d: f64 = self
            .call(Role::ImageDistance, &wire::distance_request(a, b))?
            .param("distance")?;
        if !d.is_finite() {
            return Err(GenError::Protocol(format!("distance {d} is not finite")));
        }
        Ok(d)
    }
}
