//! Generator protocol: abstract interfaces for the external generators, the
//! HTTP wire format, and deterministic procedural mocks.

use std::sync::Arc;

use image::{GrayImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing2d::{InpaintRequest, TileImagePrompt};
use crate::isorender::FramedImage;
use crate::latentops::{DenoiseStep, Denoiser, NoiseSchedule, SparseLatentVolume};
use crate::occupancy::OccupancyVolume;
use crate::splat::SplatSet;
use crate::worldspec::WorldSpec;

pub mod client;
pub mod conformance;
mod distance;
pub mod mock;
pub mod server;
pub mod wire;

pub use distance::{ms_ssim, MsSsim};

pub const PROTOCOL_VERSION: &str = "1.0";
pub const PROTOCOL_MAJOR: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("protocol version {got} is incompatible with {expected}")]
    Version { expected: String, got: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("prompt expansion failed: {message}")]
    Expansion { message: String, raw: String },
    #[error("artifact decode: {0}")]
    Decode(String),
    #[error("artifact shape: {0}")]
    Shape(String),
    #[error("remote error ({status}): {message}")]
    Remote { status: u16, message: String },
    #[error("operation not supported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    PromptExpander,
    #[serde(rename = "inpainter-2d")]
    Inpainter2d,
    #[serde(rename = "image-to-3d")]
    ImageTo3d,
    LatentDenoiser,
    BackgroundRemoval,
    ImageDistance,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::PromptExpander,
        Role::Inpainter2d,
        Role::ImageTo3d,
        Role::LatentDenoiser,
        Role::BackgroundRemoval,
        Role::ImageDistance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::PromptExpander => "prompt-expander",
            Role::Inpainter2d => "inpainter-2d",
            Role::ImageTo3d => "image-to-3d",
            Role::LatentDenoiser => "latent-denoiser",
            Role::BackgroundRemoval => "background-removal",
            Role::ImageDistance => "image-distance",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Splats, first-stage occupancy and second-stage latents of one 3D sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Image3DResult {
    pub splats: SplatSet,
    pub occupancy: OccupancyVolume,
    pub latents: SparseLatentVolume,
    pub seed: u64,
}

impl Image3DResult {
    pub fn check(&self) -> Result<(), GenError> {
        let r = self.occupancy.dims();
        if self.latents.dims() != r {
            return Err(GenError::Shape(format!(
                "occupancy {:?} vs latents {:?}",
                r,
                self.latents.dims()
            )));
        }
        if let Some(c) = self.latents.keys().find(|c| {
            !self
                .occupancy
                .get(c[0] as usize, c[1] as usize, c[2] as usize)
        }) {
            return Err(GenError::Shape(format!(
                "latent cell {c:?} is not occupied"
            )));
        }
        self.splats
            .validate()
            .map_err(|e| GenError::Shape(e.to_string()))
    }
}

/// One conditioned denoising call.
#[derive(Debug, Clone)]
pub struct DenoiseRequest {
    pub latents: SparseLatentVolume,
    pub step: usize,
    pub schedule: NoiseSchedule,
    pub views: Vec<FramedImage>,
    /// Features that unobserved cells are pulled toward, if any.
    pub reference: Option<SparseLatentVolume>,
}

pub trait PromptExpander: Send + Sync {
    fn expand(&self, seed_prompt: &str, width: u32, height: u32) -> Result<WorldSpec, GenError>;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, req: &InpaintRequest) -> Result<FramedImage, GenError>;
}

pub trait ImageTo3d: Send + Sync {
    /// `attempt` counts earlier rejected samples for the same tile.
    fn image_to_3d(
        &self,
        prompt: &TileImagePrompt,
        seed: u64,
        attempt: u32,
    ) -> Result<Image3DResult, GenError>;
}

pub trait LatentDenoiser: Send + Sync {
    fn denoise_step(&self, req: &DenoiseRequest) -> Result<DenoiseStep, GenError>;
    fn decode(&self, latents: &SparseLatentVolume) -> Result<SplatSet, GenError>;
}

pub trait BackgroundRemoval: Send + Sync {
    /// Returns an RGBA image of the same size whose alpha isolates the
    /// foreground.
    fn remove(&self, image: &FramedImage) -> Result<RgbaImage, GenError>;
}

pub trait ImageDistance: Send + Sync {
    fn distance(&self, a: &RgbaImage, b: &RgbaImage) -> Result<f64, GenError>;
}

/// Binds a latent denoiser to one conditioning view for the latent
/// operators.
pub struct ViewDenoiser<'a> {
    pub denoiser: &'a dyn LatentDenoiser,
    pub views: Vec<FramedImage>,
    pub reference: Option<&'a SparseLatentVolume>,
}

impl Denoiser for ViewDenoiser<'_> {
    fn step(
        &self,
        latents: &SparseLatentVolume,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<DenoiseStep, String> {
        let req = DenoiseRequest {
            latents: latents.clone(),
            step: t,
            schedule: *schedule,
            views: self.views.clone(),
            reference: self.reference.cloned(),
        };
        let out = self
            .denoiser
            .denoise_step(&req)
            .map_err(|e| e.to_string())?;
        if !out.latents.same_cells(latents) {
            return Err("denoiser changed the cell set".into());
        }
        if !out.latents.all_finite() {
            return Err("denoiser returned non-finite features".into());
        }
        Ok(out)
    }
}

/// Uses the exact foreground alpha carried by synthetic frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatte;

impl BackgroundRemoval for ExactMatte {
    fn remove(&self, image: &FramedImage) -> Result<RgbaImage, GenError> {
        let matte: &GrayImage = image
            .matte
            .as_ref()
            .ok_or_else(|| GenError::Param("frame carries no matte".into()))?;
        if matte.dimensions() != image.pixels.dimensions() {
            return Err(GenError::Param("matte size differs from the frame".into()));
        }
        let mut out = image.pixels.clone();
        for (p, m) in out.pixels_mut().zip(matte.pixels()) {
            p[3] = p[3].min(m[0]);
        }
        Ok(out)
    }
}

/// Keys out pixels within `threshold` (RGB unit cube) of a background color.
#[derive(Debug, Clone, Copy)]
pub struct ChromaThreshold {
    pub background: [u8; 3],
    pub threshold: f64,
}

impl BackgroundRemoval for ChromaThreshold {
    fn remove(&self, image: &FramedImage) -> Result<RgbaImage, GenError> {
        let mut out = image.pixels.clone();
        let bg = self.background.map(|c| c as f64 / 255.0);
        for p in out.pixels_mut() {
            let d: f64 = (0..3)
                .map(|k| (p[k] as f64 / 255.0 - bg[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= self.threshold {
                p[3] = 0;
            }
        }
        Ok(out)
    }
}

/// Keeps the input alpha unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRemoval;

impl BackgroundRemoval for IdentityRemoval {
    fn remove(&self, image: &FramedImage) -> Result<RgbaImage, GenError> {
        Ok(image.pixels.clone())
    }
}

/// One active implementation per role.
#[derive(Clone)]
pub struct Endpoints {
    pub expander: Arc<dyn PromptExpander>,
    pub inpainter: Arc<dyn Inpainter>,
    pub image_to_3d: Arc<dyn ImageTo3d>,
    pub denoiser: Arc<dyn LatentDenoiser>,
    pub background: Arc<dyn BackgroundRemoval>,
    pub distance: Arc<dyn ImageDistance>,
}

impl Endpoints {
    /// Every role served by the procedural mocks.
    pub fn mock(config: mock::MockConfig) -> Self {
        let model = Arc::new(mock::MockWorldModel::new(config));
        Self {
            expander: model.clone(),
            inpainter: model.clone(),
            image_to_3d: model.clone(),
            denoiser: model,
            background: Arc::new(ExactMatte),
            distance: Arc::new(MsSsim::default()),
        }
    }

    /// Every role forwarded to one remote service.
    pub fn remote(client: client::RemoteClient) -> Self {
        let c = Arc::new(client);
        Self {
            expander: c.clone(),
            inpainter: c.clone(),
            image_to_3d: c.clone(),
            denoiser: c.clone(),
            background: c.clone(),
            distance: c,
        }
    }
}
