//! Contract checks runnable against any remote generator service.

use image::{Luma, Rgba, RgbaImage};
use serde::Serialize;

use super::client::{check_outside_mask, RemoteClient};
use super::{
    wire, BackgroundRemoval, DenoiseRequest, GenError, ImageDistance, ImageTo3d, LatentDenoiser,
    PromptExpander, Role,
};
use crate::framing2d::{InpaintRequest, TileImagePrompt};
use crate::isorender::{self, FrameKind, FramedImage, IsometricCamera, Provenance, SlabParams};
use crate::latentops::{NoiseSchedule, SparseLatentVolume};
use crate::raster::PixelRect;
use crate::worldspec::TileCoord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub role: Option<Role>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

const SIZE: u32 = 96;
const TILE: TileCoord = TileCoord { x: 0, y: 0 };

fn fixture_request() -> Result<InpaintRequest, GenError> {
    let camera =
        IsometricCamera::isometric(SIZE, 0.4).centered_on(TILE, isorender::DEFAULT_CUBE_HEIGHT);
    let mut base = isorender::render_base_slab(&camera, TILE, &SlabParams::default())
        .map_err(|e| GenError::Param(e.to_string()))?;
    base.provenance = Some(Provenance {
        tile: TILE,
        prompt: "conformance".into(),
        seed: 1,
    });
    let mask = isorender::make_inpaint_mask(
        &camera,
        TILE,
        std::iter::empty(),
        isorender::DEFAULT_CUBE_HEIGHT,
    );
    Ok(InpaintRequest::new(base, mask, "conformance", 1))
}

fn pattern(seed: u32, side: u32) -> RgbaImage {
    RgbaImage::from_fn(side, side, |x, y| {
        Rgba([
            ((x * 5 + seed * 17) % 256) as u8,
            ((y * 7) % 256) as u8,
            ((x ^ y) * 3 % 256) as u8,
            255,
        ])
    })
}

fn outcome(name: &str, role: Option<Role>, r: Result<String, GenError>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult {
            name: name.into(),
            role,
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            role,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> GenError {
    GenError::Protocol(msg)
}

/// Runs every check for `roles` (all roles when empty). The version check
/// always runs first; later checks still run when it fails.
pub fn run(client: &RemoteClient, roles: &[Role]) -> ConformanceReport {
    let wants = |r: Role| roles.is_empty() || roles.contains(&r);
    let mut checks = vec![outcome(
        "version",
        None,
        client.server_version().and_then(|v| {
            wire::check_version(&v.protocol_version)
                .map(|_| format!("server reports {}", v.protocol_version))
        }),
    )];

    if wants(Role::PromptExpander) {
        checks.push(outcome(
            "expander-schema",
            Some(Role::PromptExpander),
            client.expand("harbor town", 2, 2).and_then(|s| {
                if s.width() == 2 && s.height() == 2 {
                    Ok("2x2 spec parsed".into())
                } else {
                    Err(fail(format!(
                        "asked for 2x2, got {}x{}",
                        s.width(),
                        s.height()
                    )))
                }
            }),
        ));
    }

    if wants(Role::Inpainter2d) {
        let result =
            fixture_request().and_then(|req| client.inpaint_unchecked(&req).map(|out| (req, out)));
        match result {
            Ok((req, out)) => {
                let dims = out.pixels.dimensions() == req.base.pixels.dimensions();
                checks.push(outcome(
                    "inpaint-dimensions",
                    Some(Role::Inpainter2d),
                    if dims {
                        Ok(format!("{SIZE}x{SIZE}"))
                    } else {
                        Err(fail(format!("returned {:?}", out.pixels.dimensions())))
                    },
                ));
                checks.push(outcome(
                    "inpaint-outside-mask",
                    Some(Role::Inpainter2d),
                    check_outside_mask(&req, &out.pixels)
                        .map(|_| "base preserved within 1/255".into()),
                ));
            }
            Err(e) => {
                checks.push(outcome(
                    "inpaint-dimensions",
                    Some(Role::Inpainter2d),
                    Err(e.clone()),
                ));
                checks.push(outcome(
                    "inpaint-outside-mask",
                    Some(Role::Inpainter2d),
                    Err(e),
                ));
            }
        }
    }

    if wants(Role::ImageTo3d) {
        let r = fixture_request().and_then(|req| {
            let prompt = TileImagePrompt {
                image: req.base.pixels.clone(),
                rect: PixelRect {
                    x: 0,
                    y: 0,
                    width: SIZE,
                    height: SIZE,
                },
                camera: req.base.camera,
                tile: TILE,
                slab: SlabParams {
                    margin: 0.1,
                    ..SlabParams::default()
                },
                provenance: req.base.provenance.clone(),
            };
            let out = client.image_to_3d(&prompt, 1, 0)?;
            out.check()?;
            if !out.occupancy.is_cubic() {
                return Err(GenError::Shape(format!(
                    "occupancy {:?} is not cubic",
                    out.occupancy.dims()
                )));
            }
            Ok(format!(
                "R = {}, {} latent cells, {} splats",
                out.occupancy.resolution(),
                out.latents.len(),
                out.splats.len()
            ))
        });
        checks.push(outcome("image-to-3d-shapes", Some(Role::ImageTo3d), r));
    }

    if wants(Role::LatentDenoiser) {
        let mut latents = SparseLatentVolume::cubic(8, 8);
        for x in 0..8u16 {
            for y in 0..8u16 {
                latents
                    .insert([x, y, 0], vec![0.5, 0.2, 0.1, 1.0, 0.0, 0.0, 0.0, 0.0])
                    .expect("in range");
            }
        }
        let mut camera = IsometricCamera::isometric(64, 0.5);
        camera.look_at = [0.0, 0.0, -0.4];
        let view = FramedImage::new(pattern(3, 64), camera, FrameKind::Context);
        let req = DenoiseRequest {
            latents: latents.clone(),
            step: 4,
            schedule: NoiseSchedule::new(8, 0),
            views: vec![view],
            reference: None,
        };
        let r = client.denoise_step(&req).and_then(|a| {
            let b = client.denoise_step(&req)?;
            if a != b {
                return Err(fail(
                    "two identical requests returned different latents".into(),
                ));
            }
            Ok("repeatable, layout preserved".into())
        });
        checks.push(outcome(
            "denoiser-determinism",
            Some(Role::LatentDenoiser),
            r,
        ));
        checks.push(outcome(
            "decode-validity",
            Some(Role::LatentDenoiser),
            client
                .decode(&latents)
                .map(|s| format!("{} splats", s.len())),
        ));
    }

    if wants(Role::BackgroundRemoval) {
        let mut img = FramedImage::new(
            pattern(1, 48),
            IsometricCamera::isometric(48, 0.4),
            FrameKind::InpaintResult,
        );
        for (i, p) in img.pixels.pixels_mut().enumerate() {
            p[3] = (i % 256) as u8;
        }
        img.matte = Some(image::GrayImage::from_fn(48, 48, |x, _| {
            Luma([(x * 5) as u8])
        }));
        let r = client.remove(&img).and_then(|out| {
            if out.dimensions() != img.pixels.dimensions() {
                return Err(fail(format!("returned {:?}", out.dimensions())));
            }
            match out
                .pixels()
                .zip(img.pixels.pixels())
                .position(|(o, i)| o[3] > i[3])
            {
                Some(i) => Err(fail(format!("alpha raised at pixel index {i}"))),
                None => Ok("alpha bounded by input".into()),
            }
        });
        checks.push(outcome(
            "removal-alpha-bound",
            Some(Role::BackgroundRemoval),
            r,
        ));
    }

    if wants(Role::ImageDistance) {
        let (a, b) = (pattern(1, 48), pattern(2, 48));
        let r = client.distance(&a, &a).and_then(|same| {
            let other = client.distance(&a, &b)?;
            if same.abs() > 1e-9 {
                Err(fail(format!("d(a, a) = {same}")))
            } else if other < 0.0 {
                Err(fail(format!("negative distance {other}")))
            } else {
                Ok(format!("d(a, a) = 0, d(a, b) = {other:.4}"))
            }
        });
        checks.push(outcome("distance-identity", Some(Role::ImageDistance), r));
    }

    ConformanceReport {
        endpoint: client.base_url().to_string(),
        checks,
    }
}
