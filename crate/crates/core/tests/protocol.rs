use std::collections::BTreeMap;
use std::time::Duration;

use tileworld::framing2d::{self, FramingParams};
use tileworld::genproto::client::RemoteClient;
use tileworld::genproto::mock::{MockConfig, MockWorldModel};
use tileworld::genproto::server::{self, ServerHandle, ServerOptions};
use tileworld::genproto::{
    conformance, wire, BackgroundRemoval, DenoiseRequest, Endpoints, ExactMatte, GenError,
    ImageDistance, ImageTo3d, Inpainter, LatentDenoiser, MsSsim, PromptExpander, Role,
};
use tileworld::isorender::{FrameKind, IsometricCamera};
use tileworld::latentops::{NoiseSchedule, SparseLatentVolume, VoxelFrame};
use tileworld::pipeline::{self, BlendMode, BuildOptions, PipelineConfig};
use tileworld::worldspec::{parse_world_spec, TileCoord, WorldSpec};

const EXAMPLE_SPEC: &str = r#"{"tiles": [
{ "prompt": "ancient stone bridge over a stream", "x": 0, "y": 0 },
{ "prompt": "lively stream past mossy banks", "x": 1, "y": 0 },
{ "prompt": "serene pond reflecting moonlight", "x": 0, "y": 1 },
{ "prompt": "bustling medieval market street", "x": 1, "y": 1 } ],
"prompt": "{tile_prompt}, medieval setting, isometric view, glowing lanterns, soft shading, vibrant colors, detailed textures"}"#;

fn serve(options: ServerOptions) -> (ServerHandle, RemoteClient) {
    let handle = server::spawn(
        Endpoints::mock(MockConfig::default()),
        options,
        "127.0.0.1:0",
    )
    .unwrap();
    let client = RemoteClient::new(&handle.url(), Duration::from_secs(120), 0);
    (handle, client)
}

fn small_framing() -> FramingParams {
    FramingParams {
        camera: IsometricCamera::isometric(192, 0.4),
        ..FramingParams::default()
    }
}

fn one_tile() -> WorldSpec {
    parse_world_spec(
        br#"{"tiles":[{"prompt":"village well","x":0,"y":0}],"prompt":"{tile_prompt}, isometric"}"#,
    )
    .unwrap()
}

fn inpaint_request() -> framing2d::InpaintRequest {
    framing2d::build_inpaint_request(
        &one_tile(),
        &BTreeMap::new(),
        TileCoord::new(0, 0),
        5,
        &small_framing(),
    )
    .unwrap()
}

fn small_volume() -> SparseLatentVolume {
    let mut v = SparseLatentVolume::cubic(6, 8).with_frame(VoxelFrame::unit_cube([6; 3]));
    for x in 1..5u16 {
        for y in 1..5u16 {
            for z in 0..2u16 {
                v.insert(
                    [x, y, z],
                    vec![0.2 * x as f32, 0.1 * y as f32, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0],
                )
                .unwrap();
            }
        }
    }
    v
}

#[test]
fn every_role_round_trips_unchanged() {
    let (_server, client) = serve(ServerOptions::default());
    let local = MockWorldModel::new(MockConfig::default());

    assert_eq!(
        client.expand("harbor town", 3, 2).unwrap(),
        local.expand("harbor town", 3, 2).unwrap()
    );

    let req = inpaint_request();
    let remote_img = client.inpaint(&req).unwrap();
    let local_img = local.inpaint(&req).unwrap();
    assert_eq!(remote_img.pixels, local_img.pixels);
    assert_eq!(remote_img.kind, FrameKind::InpaintResult);

    assert_eq!(
        client.remove(&local_img).unwrap(),
        ExactMatte.remove(&local_img).unwrap()
    );

    let fg = framing2d::extract_foreground(&local_img, &req.mask, &ExactMatte).unwrap();
    let prompt = framing2d::rebase(&fg, TileCoord::new(0, 0), &small_framing().slab).unwrap();
    assert_eq!(
        client.image_to_3d(&prompt, 9, 0).unwrap(),
        local.image_to_3d(&prompt, 9, 0).unwrap()
    );

    let latents = small_volume();
    let dreq = DenoiseRequest {
        latents: latents.clone(),
        step: 3,
        schedule: NoiseSchedule::new(8, 1),
        views: vec![local_img.clone()],
        reference: Some(latents.clone()),
    };
    assert_eq!(
        client.denoise_step(&dreq).unwrap(),
        local.denoise_step(&dreq).unwrap()
    );
    assert_eq!(
        client.decode(&latents).unwrap(),
        local.decode(&latents).unwrap()
    );

    let a = local_img.pixels.clone();
    let mut b = a.clone();
    b.put_pixel(3, 3, image::Rgba([255, 0, 0, 255]));
    assert_eq!(
        client.distance(&a, &b).unwrap(),
        MsSsim::default().distance(&a, &b).unwrap()
    );
}

#[test]
fn remote_build_matches_in_process_build() {
    let (_server, client) = serve(ServerOptions::default());
    let config = PipelineConfig {
        framing: small_framing(),
        blend: BlendMode::Off,
        ..PipelineConfig::default()
    };
    let spec = one_tile();
    let local = pipeline::build_world(
        &spec,
        &Endpoints::mock(MockConfig::default()),
        &config,
        &BuildOptions::default(),
    )
    .unwrap();
    let remote = pipeline::build_world(
        &spec,
        &Endpoints::remote(client),
        &config,
        &BuildOptions::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline::export_world(&local.grid, &local.report, &dir.path().join("local")).unwrap();
    let b =
        pipeline::export_world(&remote.grid, &remote.report, &dir.path().join("remote")).unwrap();
    assert_eq!(
        (a.ply_sha256, a.manifest_sha256),
        (b.ply_sha256, b.manifest_sha256)
    );
}

#[test]
fn mock_service_passes_every_check() {
    let (_server, client) = serve(ServerOptions::default());
    let report = conformance::run(&client, &[]);
    assert!(report.passed(), "{:?}", report.failed());
    let roles: Vec<Role> = report.checks.iter().filter_map(|c| c.role).collect();
    for r in Role::ALL {
        assert!(roles.contains(&r), "no check for {r}");
    }
}

#[test]
fn outside_mask_edits_are_caught() {
    let (_server, client) = serve(ServerOptions {
        adversarial: true,
        ..ServerOptions::default()
    });
    assert!(matches!(
        client.inpaint(&inpaint_request()),
        Err(GenError::Protocol(_))
    ));
    let report = conformance::run(&client, &[]);
    assert_eq!(report.failed(), ["inpaint-outside-mask"]);
}

#[test]
fn major_version_mismatch_fails_first() {
    let (_server, client) = serve(ServerOptions {
        protocol_version: "2.0".into(),
        ..ServerOptions::default()
    });
    assert!(matches!(
        client.expand("x", 1, 1),
        Err(GenError::Version { .. })
    ));
    let report = conformance::run(&client, &[Role::ImageDistance]);
    assert_eq!(report.checks[0].name, "version");
    assert!(!report.checks[0].passed);

    let (_server, client) = serve(ServerOptions {
        protocol_version: "1.7".into(),
        ..ServerOptions::default()
    });
    assert!(client.expand("x", 1, 1).is_ok());
}

#[test]
fn expander_reply_is_parsed_as_a_spec() {
    let (_server, client) = serve(ServerOptions {
        expander_reply: Some(EXAMPLE_SPEC.into()),
        ..ServerOptions::default()
    });
    assert_eq!(
        client.expand("medieval town", 2, 2).unwrap(),
        parse_world_spec(EXAMPLE_SPEC.as_bytes()).unwrap()
    );

    let (_server, client) = serve(ServerOptions {
        expander_reply: Some("{\"tiles\": []".into()),
        ..ServerOptions::default()
    });
    match client.expand("medieval town", 2, 2) {
        Err(GenError::Expansion { raw, .. }) => assert_eq!(raw, "{\"tiles\": []"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn blobs_are_content_addressed() {
    let (server, _) = serve(ServerOptions::default());
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let body = b"tile bytes".to_vec();
    let hash = wire::content_hash(&body);
    let wrong = agent
        .put(format!(
            "{}/v1/blobs/{}",
            server.url(),
            wire::content_hash(b"other")
        ))
        .send(&body[..])
        .unwrap();
    assert_eq!(wrong.status().as_u16(), 400);
    let ok = agent
        .put(format!("{}/v1/blobs/{hash}", server.url()))
        .send(&body[..])
        .unwrap();
    assert!(ok.status().is_success());
    let mut got = agent
        .get(format!("{}/v1/blobs/{hash}", server.url()))
        .call()
        .unwrap();
    assert_eq!(got.body_mut().read_to_vec().unwrap(), body);
    let missing = agent
        .get(format!(
            "{}/v1/blobs/{}",
            server.url(),
            wire::content_hash(b"none")
        ))
        .call()
        .unwrap();
    assert_eq!(missing.status().as_u16(), 404);
}
