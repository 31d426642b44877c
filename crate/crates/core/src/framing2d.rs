//! 2D inpainting requests built from the world generated so far, and the
//! conversion of inpainted results into image prompts for the 3D generator.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genproto::{BackgroundRemoval, GenError};
use crate::isorender::{
    self, FrameKind, FramedImage, IsometricCamera, Provenance, RenderError, SlabParams,
    DEFAULT_CUBE_HEIGHT, DEFAULT_TRIM_HEIGHT,
};
use crate::raster::{self, Mask, PixelRect};
use crate::splat::SplatSet;
use crate::worldspec::{self, ContextOptions, PromptMode, TileCoord, WorldSpec};

/// Slab margin used when rebasing, in tile units per side.
pub const DEFAULT_REBASE_MARGIN: f64 = 0.1;
/// Fraction of foreground pixels treated as the ground-contact band.
const CONTACT_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("tile {target} requested out of build order (next is {expected:?})")]
    OutOfOrder {
        target: TileCoord,
        expected: Option<TileCoord>,
    },
    #[error("tile {0} is not part of the grid")]
    NotInGrid(TileCoord),
    #[error("inpainting mask for tile {0} is empty")]
    EmptyMask(TileCoord),
    #[error("expected an inpaint result, got {0:?}")]
    WrongKind(FrameKind),
    #[error("no foreground left after background removal")]
    EmptyForeground,
    #[error("foreground {rect:?} does not fit a {size}px frame")]
    FrameOverflow { rect: PixelRect, size: u32 },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Generator(#[from] GenError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    /// Base image B; its `mask` field mirrors `mask`.
    pub base: FramedImage,
    pub mask: Mask,
    pub prompt: String,
    pub seed: u64,
}

impl InpaintRequest {
    pub fn new(mut base: FramedImage, mask: Mask, prompt: impl Into<String>, seed: u64) -> Self {
        base.mask = mask.clone();
        Self {
            base,
            mask,
            prompt: prompt.into(),
            seed,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.base.pixels.dimensions() != self.mask.dimensions() {
            return Err(format!(
                "base {:?} and mask {:?} differ in size",
                self.base.pixels.dimensions(),
                self.mask.dimensions()
            ));
        }
        if self.mask.is_empty() {
            return Err("mask has no set pixels".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramingParams {
    pub camera: IsometricCamera,
    /// Slab drawn under the target in the base image.
    pub slab: SlabParams,
    pub cube_height: f64,
    pub trim_height: f64,
    pub context: ContextOptions,
    pub prompt_mode: PromptMode,
}

impl Default for FramingParams {
    fn default() -> Self {
        Self {
            camera: IsometricCamera::default(),
            slab: SlabParams::default(),
            cube_height: DEFAULT_CUBE_HEIGHT,
            trim_height: DEFAULT_TRIM_HEIGHT,
            context: ContextOptions::default(),
            prompt_mode: PromptMode::Substitute,
        }
    }
}

/// Base image, mask and prompt for the next tile. `placed` holds the world
/// space splats of every generated tile and is only read.
pub fn build_inpaint_request(
    spec: &WorldSpec,
    placed: &BTreeMap<TileCoord, SplatSet>,
    target: TileCoord,
    seed: u64,
    params: &FramingParams,
) -> Result<InpaintRequest, FramingError> {
    if !spec.contains(target) {
        return Err(FramingError::NotInGrid(target));
    }
    let order = worldspec::build_order(spec.width(), spec.height());
    let expected = order.as_slice().get(placed.len()).copied();
    let prefix_ok = placed
        .keys()
        .copied()
        .eq(order.as_slice()[..placed.len().min(order.len())]
            .iter()
            .copied());
    if expected != Some(target) || !prefix_ok {
        return Err(FramingError::OutOfOrder { target, expected });
    }

    let camera = params.camera.centered_on(target, params.cube_height);
    let generated: BTreeSet<TileCoord> = placed.keys().copied().collect();
    let context = worldspec::context_tiles(target, &generated, params.context);

    let mut scene = SplatSet::default();
    for c in &context.tiles {
        scene.extend(&placed[c]);
    }
    let mut occupied: Vec<TileCoord> = generated.iter().copied().collect();
    if let Some(copy) = context.virtual_copy {
        let dx = (copy.position.x - copy.source.x) as f64;
        let dy = (copy.position.y - copy.source.y) as f64;
        scene.extend(&placed[&copy.source].translated([dx, dy, 0.0]));
        occupied.push(copy.position);
    }
    let scene = isorender::trim_tall_geometry(
        &scene,
        target,
        &camera,
        params.trim_height,
        params.cube_height,
    );

    let mut base = if scene.is_empty() {
        isorender::render_base_slab(&camera, target, &params.slab)?
    } else {
        let mut img = isorender::render_splats(&scene, &camera)?;
        isorender::draw_slab(&mut img.pixels, &camera, target, &params.slab);
        img.kind = FrameKind::Context;
        img
    };
    let prompt = worldspec::compose_prompt(spec, target, params.prompt_mode);
    base.provenance = Some(Provenance {
        tile: target,
        prompt: prompt.clone(),
        seed,
    });

    let mask = isorender::make_inpaint_mask(&camera, target, &occupied, params.cube_height);
    if mask.is_empty() {
        return Err(FramingError::EmptyMask(target));
    }
    Ok(InpaintRequest::new(base, mask, prompt, seed))
}

/// Tightly cropped foreground of an inpainted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Foreground {
    pub pixels: RgbaImage,
    /// Position of `pixels` within the source frame.
    pub rect: PixelRect,
    pub camera: IsometricCamera,
    pub provenance: Option<Provenance>,
}

impl Foreground {
    /// The foreground pasted back at its position in a transparent frame.
    pub fn in_frame(&self) -> RgbaImage {
        let size = self.camera.size;
        let mut out = raster::transparent(size, size);
        paste(&mut out, &self.pixels, self.rect);
        out
    }
}

fn paste(dst: &mut RgbaImage, src: &RgbaImage, rect: PixelRect) {
    for (x, y, p) in src.enumerate_pixels() {
        let (dx, dy) = (rect.x + x as i64, rect.y + y as i64);
        if dx >= 0 && dy >= 0 && (dx as u32) < dst.width() && (dy as u32) < dst.height() && p[3] > 0
        {
            let d = dst.get_pixel_mut(dx as u32, dy as u32);
            *d = raster::over(*p, *d);
        }
    }
}

/// Clears pixels outside `mask`, lets `remover` refine the silhouette, and
/// crops to the remaining nontransparent pixels. Alpha never exceeds the
/// masked input.
pub fn extract_foreground(
    image: &FramedImage,
    mask: &Mask,
    remover: &dyn BackgroundRemoval,
) -> Result<Foreground, FramingError> {
    if image.kind != FrameKind::InpaintResult {
        return Err(FramingError::WrongKind(image.kind));
    }
    let mut masked = image.clone();
    for (x, y, p) in masked.pixels.enumerate_pixels_mut() {
        if !mask.get(x, y) {
            *p = image::Rgba([0, 0, 0, 0]);
        }
    }
    masked.mask = mask.clone();
    let mut refined = remover.remove(&masked)?;
    if refined.dimensions() != masked.pixels.dimensions() {
        return Err(GenError::Protocol(format!(
            "background removal changed size {:?} -> {:?}",
            masked.pixels.dimensions(),
            refined.dimensions()
        ))
        .into());
    }
    for (r, m) in refined.pixels_mut().zip(masked.pixels.pixels()) {
        r[3] = r[3].min(m[3]);
        if r[3] == 0 {
            *r = image::Rgba([0, 0, 0, 0]);
        }
    }
    let rect = raster::bounding_box(refined.width(), refined.height(), |x, y| {
        refined.get_pixel(x, y)[3] > 0
    })
    .ok_or(FramingError::EmptyForeground)?;
    Ok(Foreground {
        pixels: raster::crop(&refined, rect),
        rect,
        camera: image.camera,
        provenance: image.provenance.clone(),
    })
}

/// Image prompt J for the 3D generator: the foreground over a slightly
/// larger gray slab, cropped to its silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImagePrompt {
    pub image: RgbaImage,
    pub rect: PixelRect,
    pub camera: IsometricCamera,
    pub tile: TileCoord,
    pub slab: SlabParams,
    pub provenance: Option<Provenance>,
}

impl TileImagePrompt {
    pub fn in_frame(&self) -> RgbaImage {
        let size = self.camera.size;
        let mut out = raster::transparent(size, size);
        paste(&mut out, &self.image, self.rect);
        out
    }
}

/// Row below which only `fraction` of the set pixels lie.
fn contact_row(
    width: u32,
    height: u32,
    fraction: f64,
    set: impl Fn(u32, u32) -> bool,
) -> Option<u32> {
    let mut rows = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if set(x, y) {
                rows.push(y);
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    let idx = ((rows.len() - 1) as f64 * (1.0 - fraction)).round() as usize;
    Some(rows[idx])
}

/// Composites the foreground over a gray slab whose footprint exceeds the
/// tile by `slab.margin` per side. The slab is shifted vertically so the
/// ground-contact row of the foreground matches that of the unit footprint.
pub fn rebase(
    fg: &Foreground,
    tile: TileCoord,
    slab: &SlabParams,
) -> Result<TileImagePrompt, FramingError> {
    let camera = fg.camera;
    camera.check()?;
    let size = camera.size;
    let r = fg.rect;
    if fg.pixels.width() == 0 || fg.pixels.height() == 0 || !fg.pixels.pixels().any(|p| p[3] > 0) {
        return Err(FramingError::EmptyForeground);
    }
    if r.x < 0
        || r.y < 0
        || r.x + r.width as i64 > size as i64
        || r.y + r.height as i64 > size as i64
    {
        return Err(FramingError::FrameOverflow { rect: r, size });
    }

    let fg_contact = contact_row(
        fg.pixels.width(),
        fg.pixels.height(),
        CONTACT_FRACTION,
        |x, y| fg.pixels.get_pixel(x, y)[3] > 0,
    )
    .map(|row| row as i64 + r.y);
    let footprint = isorender::slab_top_mask(
        &camera,
        tile,
        &SlabParams {
            margin: 0.0,
            ..*slab
        },
    );
    let fp_contact = contact_row(size, size, CONTACT_FRACTION, |x, y| footprint.get(x, y));
    let max_shift = (slab.thickness.max(0.05) / camera.scale).round() as i64;
    let shift = match (fg_contact, fp_contact) {
        (Some(a), Some(b)) => (a - b as i64).clamp(-max_shift, max_shift),
        _ => 0,
    };

    let mut slab_cam = camera;
    slab_cam.principal_offset[1] += shift as f64;
    let mut canvas = raster::transparent(size, size);
    isorender::draw_slab(&mut canvas, &slab_cam, tile, slab);
    paste(&mut canvas, &fg.pixels, r);
    let rect = raster::bounding_box(size, size, |x, y| canvas.get_pixel(x, y)[3] > 0)
        .ok_or(FramingError::EmptyForeground)?;
    Ok(TileImagePrompt {
        image: raster::crop(&canvas, rect),
        rect,
        camera,
        tile,
        slab: *slab,
        provenance: fg.provenance.clone(),
    })
}
