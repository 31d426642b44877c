//! Seam blending between two placed tiles in latent space.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{seam_orientation, PipelineConfig, PipelineError, WorldGrid};
use crate::framing2d::InpaintRequest;
use crate::genproto::{Endpoints, GenError, ViewDenoiser};
use crate::isorender::{self, FrameKind, FramedImage, IsometricCamera, Provenance};
use crate::latentops::{
    self, Denoiser, LatentError, NoiseSchedule, SeamOrientation, SparseLatentVolume, UnitCrop,
    VoxelFrame,
};
use crate::raster::Mask;
use crate::seed;
use crate::splat::{Gaussian, SplatSet};
use crate::worldspec::TileCoord;

/// Upsampled, axis-aligned latents per tile. Derived from the accepted
/// sample only, so entries stay valid while seams change.
pub(crate) type UpsampleCache = HashMap<TileCoord, SparseLatentVolume>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendStatus {
    Blended,
    /// Decoding failed or the denoiser could not run; the seam is unchanged.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendRecord {
    /// West or north tile.
    pub a: TileCoord,
    pub b: TileCoord,
    pub orientation: SeamOrientation,
    pub status: BlendStatus,
    pub removed: usize,
    pub added: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

const VIEW_AZIMUTHS: [f64; 4] = [45.0, 135.0, 225.0, 315.0];
const VIEW_TARGET_Z: f64 = 0.25;

/// Renders of a placed tile from the four diagonal directions.
fn tile_views(
    splats: &SplatSet,
    coord: TileCoord,
    config: &PipelineConfig,
) -> Result<Vec<FramedImage>, PipelineError> {
    let base = IsometricCamera::isometric(config.view_size, config.view_fraction);
    VIEW_AZIMUTHS
        .iter()
        .map(|az| {
            let camera = IsometricCamera {
                azimuth_deg: *az,
                look_at: [coord.x as f64 + 0.5, coord.y as f64 + 0.5, VIEW_TARGET_Z],
                ..base
            };
            let mut img = isorender::render_splats(splats, &camera).map_err(|e| {
                PipelineError::Generator {
                    tile: coord,
                    source: GenError::Param(e.to_string()),
                }
            })?;
            img.kind = FrameKind::Context;
            Ok(img)
        })
        .collect()
}

/// Nearest-neighbor copy of `cropped`'s features onto a `resolution`³ grid.
fn nearest_features(cropped: &SparseLatentVolume, resolution: usize) -> SparseLatentVolume {
    let src = cropped.dims();
    let mut out = SparseLatentVolume::cubic(resolution, cropped.channels());
    for w in 0..resolution {
        for v in 0..resolution {
            for u in 0..resolution {
                let i = [u, v, w];
                if let Some(f) = cropped.get([0, 1, 2].map(|k| (i[k] * src[k] / resolution) as u16))
                {
                    out.insert([u as u16, v as u16, w as u16], f.to_vec())
                        .expect("in range");
                }
            }
        }
    }
    out
}

/// Index turn that makes the first two axes point along +x and +y.
fn align_axes(volume: &SparseLatentVolume) -> Result<SparseLatentVolume, LatentError> {
    for k in 0..4u8 {
        let turned = volume.rotate_indices(k)?;
        let a = turned.frame.axes;
        if a[0][0] > 0.0 && a[1][1] > 0.0 {
            return Ok(turned);
        }
    }
    Err(LatentError::Shape(
        "latent frame is not aligned with the grid after any quarter turn".into(),
    ))
}

/// Re-indexes `b` vertically so that its layers line up with `frame`'s.
fn match_layers(
    b: &SparseLatentVolume,
    frame: &VoxelFrame,
) -> Result<SparseLatentVolume, LatentError> {
    let dz = frame.axes[2][2];
    let shift = ((b.frame.origin[2] - frame.origin[2]) / dz).round() as i64;
    let dims = b.dims();
    let mut out = SparseLatentVolume::new(dims, b.channels()).with_frame(b.frame.shifted([
        0.0,
        0.0,
        -shift as f64,
    ]));
    for (c, f) in b.iter() {
        let z = c[2] as i64 + shift;
        if (0..dims[2] as i64).contains(&z) {
            out.insert([c[0], c[1], z as u16], f.clone())?;
        }
    }
    Ok(out)
}

/// Crops a tile's latents to its cut rectangle, maps them into the world
/// and upsamples them to R³ conditioned on renders of the placed tile.
fn upsampled(
    grid: &WorldGrid,
    coord: TileCoord,
    endpoints: &Endpoints,
    config: &PipelineConfig,
) -> Result<SparseLatentVolume, PipelineError> {
    let tile = &grid.tiles[&coord];
    let latent = |source| PipelineError::Blend {
        a: coord,
        b: coord,
        source,
    };
    let lat = &tile.sample.latents;
    let dims = lat.dims();
    let cuts = tile.transform.cuts;
    let lo = lat.frame.coordinate([cuts.x_left, cuts.y_near, 0.0]);
    let hi = lat.frame.coordinate([cuts.x_right, cuts.y_far, 0.0]);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(latent(LatentError::Shape("singular latent frame".into())));
    };
    let unit = |a: f64, b: f64, n: usize| [a.min(b) / n as f64, a.max(b) / n as f64];
    let crop = UnitCrop {
        x: unit(lo[0], hi[0], dims[0]),
        y: unit(lo[1], hi[1], dims[1]),
    };
    let mut cropped = latentops::crop_latents(lat, crop).map_err(latent)?;
    let (a, b) = tile.transform.affine();
    cropped.frame = cropped.frame.transformed(&a, b);

    let r = config.latent_resolution;
    let reference = nearest_features(&cropped, r);
    let views = tile_views(&tile.placed_splats(), coord, config)?;
    let binders: Vec<ViewDenoiser> = views
        .into_iter()
        .map(|v| ViewDenoiser {
            denoiser: endpoints.denoiser.as_ref(),
            views: vec![v],
            reference: Some(&reference),
        })
        .collect();
    let refs: Vec<&dyn Denoiser> = binders.iter().map(|b| b as &dyn Denoiser).collect();
    let schedule = NoiseSchedule::new(config.denoise_steps, seed::upsample_seed(tile.seed()));
    let up = latentops::upsample_latents(&cropped, r, &refs, &schedule, config.upsample_mode)
        .map_err(latent)?;
    align_axes(&up).map_err(latent)
}

/// World-space test for the band of a stitched volume: continuous cell
/// coordinates with `x ∈ [R/2 − r, R/2 + r + 1)` and `y ∈ [0, R)`.
pub fn seam_region(stitched: &SparseLatentVolume, r: usize) -> impl Fn([f64; 3]) -> bool + '_ {
    let res = stitched.dims()[0] as f64;
    let (lo, hi) = (res / 2.0 - r as f64, res / 2.0 + r as f64 + 1.0);
    let inv = stitched.frame.matrix().try_inverse();
    let origin = stitched.frame.origin;
    move |p| {
        let Some(inv) = inv else { return false };
        let c = inv * nalgebra::Vector3::new(p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]);
        c.x >= lo && c.x < hi && c.y >= 0.0 && c.y < res
    }
}

/// Frontal view centered on the seam, one tile wide, with the strip of
/// width 2r/R around the seam masked for inpainting.
fn seam_request(
    grid: &WorldGrid,
    a: TileCoord,
    b: TileCoord,
    orientation: SeamOrientation,
    config: &PipelineConfig,
) -> Result<InpaintRequest, PipelineError> {
    let size = config.seam_view_size;
    let (azimuth, look) = match orientation {
        SeamOrientation::EastWest => (0.0, [b.x as f64, a.y as f64 + 0.5, VIEW_TARGET_Z]),
        SeamOrientation::NorthSouth => (90.0, [a.x as f64 + 0.5, b.y as f64, VIEW_TARGET_Z]),
    };
    let camera = IsometricCamera {
        azimuth_deg: azimuth,
        scale: 1.0 / size as f64,
        look_at: look,
        ..IsometricCamera::isometric(size, 1.0)
    };
    let mut scene = grid.tiles[&a].splats.clone();
    scene.extend(&grid.tiles[&b].splats);
    let mut view =
        isorender::render_splats(&scene, &camera).map_err(|e| PipelineError::Generator {
            tile: b,
            source: GenError::Param(e.to_string()),
        })?;
    view.kind = FrameKind::SeamView;
    let s = seed::blend_seed(config.master_seed, a, b);
    view.provenance = Some(Provenance {
        tile: b,
        prompt: grid.tiles[&b].prompt.clone(),
        seed: s,
    });
    let half = (config.band_half_width as f64 / config.latent_resolution as f64 * size as f64)
        .round() as i64;
    let mid = size as i64 / 2;
    let mask = Mask::from_fn(size, size, |x, _| {
        (x as i64) >= mid - half && (x as i64) < mid + half
    });
    let prompt = grid.tiles[&b].prompt.clone();
    Ok(InpaintRequest::new(view, mask, prompt, s))
}

/// Slot of the pair under a decoded band splat's center. Splats past the
/// outer edge of both slots come from crop rounding and are dropped.
fn owner(g: &Gaussian, a: TileCoord, b: TileCoord) -> Option<TileCoord> {
    let slot = TileCoord::new(
        (g.center[0] as f64).floor() as i32,
        (g.center[1] as f64).floor() as i32,
    );
    (slot == a || slot == b).then_some(slot)
}

pub(crate) fn blend_pair_cached(
    grid: &mut WorldGrid,
    a: TileCoord,
    b: TileCoord,
    endpoints: &Endpoints,
    config: &PipelineConfig,
    cache: &mut UpsampleCache,
) -> Result<BlendRecord, PipelineError> {
    let Some((a, b, orientation)) = seam_orientation(a, b) else {
        return Err(PipelineError::NotAdjacent { a, b });
    };
    if !grid.tiles.contains_key(&a) || !grid.tiles.contains_key(&b) {
        return Err(PipelineError::NotAdjacent { a, b });
    }
    let latent = |source| PipelineError::Blend { a, b, source };
    for c in [a, b] {
        if !cache.contains_key(&c) {
            let up = upsampled(grid, c, endpoints, config)?;
            cache.insert(c, up);
        }
    }
    let ua = &cache[&a];
    let ub = match_layers(&cache[&b], &ua.frame).map_err(latent)?;
    let stitched = latentops::stitch_pair(ua, &ub, orientation).map_err(latent)?;
    let skipped = |message: String| {
        log::warn!("seam {a}-{b} left unblended: {message}");
        BlendRecord {
            a,
            b,
            orientation,
            status: BlendStatus::Skipped,
            removed: 0,
            added: 0,
            message: Some(message),
        }
    };

    let req = seam_request(grid, a, b, orientation, config)?;
    let seam = endpoints
        .inpainter
        .inpaint(&req)
        .map_err(|source| PipelineError::Generator { tile: b, source })?;
    let den = ViewDenoiser {
        denoiser: endpoints.denoiser.as_ref(),
        views: vec![seam],
        reference: Some(&stitched),
    };
    let schedule = NoiseSchedule::new(
        config.denoise_steps,
        seed::blend_seed(config.master_seed, a, b),
    );
    let blended = match latentops::blend_band(&stitched, config.band_half_width, &den, &schedule) {
        Ok(v) => v,
        Err(LatentError::Denoiser { step, message }) => {
            return Ok(skipped(format!(
                "denoiser failed at step {step}: {message}"
            )))
        }
        Err(e) => return Err(latent(e)),
    };
    let decoded = match endpoints.denoiser.decode(&blended) {
        Ok(s) => s,
        Err(e) => return Ok(skipped(format!("decode failed: {e}"))),
    };

    let inside = seam_region(&stitched, config.band_half_width);
    let centre = |g: &Gaussian| g.center.map(f64::from);
    let mut removed = 0;
    for c in [a, b] {
        let tile = grid.tiles.get_mut(&c).expect("placed");
        let before = tile.splats.len();
        let mut kept: Vec<Gaussian> = tile
            .splats
            .iter()
            .filter(|g| !inside(centre(g)))
            .copied()
            .collect();
        removed += before - kept.len();
        kept.extend(
            decoded
                .iter()
                .filter(|g| inside(centre(g)) && owner(g, a, b) == Some(c))
                .copied(),
        );
        tile.splats = SplatSet::new(kept);
    }
    let added = decoded
        .iter()
        .filter(|g| inside(centre(g)) && owner(g, a, b).is_some())
        .count();
    Ok(BlendRecord {
        a,
        b,
        orientation,
        status: BlendStatus::Blended,
        removed,
        added,
        message: None,
    })
}

/// Blends the seam between two placed 4-adjacent tiles and replaces both
/// tiles' splats inside the band.
pub fn blend_pair(
    grid: &mut WorldGrid,
    a: TileCoord,
    b: TileCoord,
    endpoints: &Endpoints,
    config: &PipelineConfig,
) -> Result<BlendRecord, PipelineError> {
    blend_pair_cached(grid, a, b, endpoints, config, &mut UpsampleCache::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_features_repeat_source_cells() {
        let mut v = SparseLatentVolume::cubic(2, 1);
        v.insert([1, 0, 1], vec![3.0]).unwrap();
        let up = nearest_features(&v, 4);
        assert_eq!(up.len(), 8);
        assert_eq!(up.get([2, 1, 3]), Some(&[3.0][..]));
        assert_eq!(up.get([1, 0, 3]), None);
    }

    #[test]
    fn align_axes_finds_the_grid_turn() {
        let mut v = SparseLatentVolume::cubic(4, 1);
        v.insert([0, 0, 0], vec![1.0]).unwrap();
        let rot = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let v = v.clone().with_frame(v.frame.transformed(&rot, [0.0; 3]));
        let p = v.frame.cell_center([0, 0, 0]);
        let aligned = align_axes(&v).unwrap();
        assert!(aligned.frame.axes[0][0] > 0.0 && aligned.frame.axes[1][1] > 0.0);
        let cell = aligned.keys().next().copied().unwrap();
        let q = aligned.frame.cell_center(cell);
        assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-12));
    }

    #[test]
    fn match_layers_shifts_by_whole_cells() {
        let mut b = SparseLatentVolume::cubic(4, 1);
        b.insert([0, 0, 0], vec![1.0]).unwrap();
        b.insert([0, 0, 3], vec![2.0]).unwrap();
        let frame = b.frame;
        let b = b.clone().with_frame(frame.shifted([0.0, 0.0, 1.0]));
        let out = match_layers(&b, &frame).unwrap();
        assert_eq!(out.get([0, 0, 1]), Some(&[1.0][..]));
        assert_eq!(out.len(), 1);
        assert_eq!(out.frame.origin, frame.origin);
    }
}
