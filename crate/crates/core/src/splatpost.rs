//! Post-processing of a generated 3D tile: base removal by color-slice cuts,
//! normalization to the unit footprint, ground alignment and quarter-turn
//! reorientation.

use image::RgbaImage;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genproto::{GenError, ImageDistance};
use crate::isorender::{self, IsometricCamera, RenderError};
use crate::raster::{self, PixelRect};
use crate::splat::{rotate_quarter_xy, Gaussian, SplatSet};
use crate::worldspec::TileCoord;

pub const DEFAULT_TAU: f64 = 0.15;
/// Slice half-width as a fraction of the tile width.
pub const DEFAULT_DELTA: f64 = 1.0 / 64.0;
/// Side of the square patches sampled at each footprint corner.
pub const DEFAULT_CORNER_PATCH: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SplatPostError {
    #[error("tile has no gaussians")]
    EmptyTile,
    #[error("no gaussians left inside the cut rectangle")]
    Degenerate,
    #[error("invalid cuts: {0}")]
    InvalidCuts(String),
    #[error("every corner patch is empty")]
    GroundDetection,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Distance(#[from] GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutParams {
    /// Color distance threshold in the RGB unit cube.
    pub tau: f64,
    /// Slice half-width relative to the tile width.
    pub delta: f64,
    /// Base margin per side in tile widths, used for fallback cuts.
    pub margin: f64,
}

impl Default for CutParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            delta: DEFAULT_DELTA,
            margin: crate::framing2d::DEFAULT_REBASE_MARGIN,
        }
    }
}

/// Four cut coordinates in the tile's own frame. `y_near` is the low-y cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutSet {
    pub x_left: f64,
    pub x_right: f64,
    pub y_near: f64,
    pub y_far: f64,
    pub tau: f64,
    /// Absolute slice half-width.
    pub delta: f64,
    /// Per direction (left, right, near, far): no transition was found and
    /// the fixed-margin fallback was used.
    pub fallback: [bool; 4],
}

impl CutSet {
    pub fn rect(x: [f64; 2], y: [f64; 2]) -> Self {
        Self {
            x_left: x[0],
            x_right: x[1],
            y_near: y[0],
            y_far: y[1],
            tau: DEFAULT_TAU,
            delta: 0.0,
            fallback: [false; 4],
        }
    }

    pub fn any_fallback(&self) -> bool {
        self.fallback.iter().any(|f| *f)
    }

    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn depth(&self) -> f64 {
        self.y_far - self.y_near
    }

    fn check(&self) -> Result<(), SplatPostError> {
        let all = [self.x_left, self.x_right, self.y_near, self.y_far];
        if all.iter().any(|v| !v.is_finite())
            || self.x_left >= self.x_right
            || self.y_near >= self.y_far
        {
            return Err(SplatPostError::InvalidCuts(format!("{all:?}")));
        }
        Ok(())
    }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sweeps slices `[x − δ, x + δ)` inward from the low end of `coords` in
/// steps of δ/2 and returns the first slice center whose opacity-weighted
/// mean color departs from the outermost slice by more than τ.
fn sweep(coords: &[(f64, [f64; 3], f64)], lo: f64, hi: f64, tau: f64, delta: f64) -> Option<f64> {
    let mut reference: Option<[f64; 3]> = None;
    let mut x = lo + delta;
    while x - delta <= hi {
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for (c, color, w) in coords {
            if *c >= x - delta && *c < x + delta {
                for k in 0..3 {
                    acc[k] += w * color[k];
                }
                wsum += w;
            }
        }
        if wsum > 0.0 {
            let mean = acc.map(|a| a / wsum);
            match reference {
                None => reference = Some(mean),
                Some(r) if color_distance(mean, r) > tau => return Some(x),
                Some(_) => {}
            }
        }
        x += delta / 2.0;
    }
    None
}

fn sweep_all(
    splats: &SplatSet,
    lo: [f64; 3],
    hi: [f64; 3],
    params: &CutParams,
    delta: f64,
) -> CutSet {
    let project = |axis: usize, sign: f64| -> Vec<(f64, [f64; 3], f64)> {
        splats
            .iter()
            .map(|g| {
                (
                    sign * g.center[axis] as f64,
                    g.color_unit(),
                    g.opacity as f64,
                )
            })
            .collect()
    };
    let inset = |extent: f64| extent * params.margin / (1.0 + 2.0 * params.margin);

    let mut fallback = [false; 4];
    let mut cut = |i: usize, axis: usize, sign: f64| -> f64 {
        let (a, b) = if sign > 0.0 {
            (lo[axis], hi[axis])
        } else {
            (-hi[axis], -lo[axis])
        };
        match sweep(&project(axis, sign), a, b, params.tau, delta) {
            Some(x) => sign * x,
            None => {
                fallback[i] = true;
                sign * (a + inset(b - a))
            }
        }
    };
    CutSet {
        x_left: cut(0, 0, 1.0),
        x_right: cut(1, 0, -1.0),
        y_near: cut(2, 1, 1.0),
        y_far: cut(3, 1, -1.0),
        tau: params.tau,
        delta,
        fallback,
    }
}

/// Locates the boundary between the gray base margin and the tile on all
/// four sides. A first sweep sizes the slices from the bounding box and the
/// nominal margin; when it finds all four sides, a second sweep uses slices
/// sized from the measured tile width.
pub fn detect_cuts(splats: &SplatSet, params: &CutParams) -> Result<CutSet, SplatPostError> {
    let (lo, hi) = splats.bounds().ok_or(SplatPostError::EmptyTile)?;
    let (lo, hi) = (lo.map(f64::from), hi.map(f64::from));
    let width = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let mut cuts = sweep_all(
        splats,
        lo,
        hi,
        params,
        params.delta * width / (1.0 + 2.0 * params.margin),
    );
    if !cuts.any_fallback() && cuts.width() > 0.0 && cuts.depth() > 0.0 {
        let refined = sweep_all(
            splats,
            lo,
            hi,
            params,
            params.delta * cuts.width().max(cuts.depth()),
        );
        if !refined.any_fallback() {
            cuts = refined;
        }
    }
    cuts.check()?;
    Ok(cuts)
}

/// Maps a tile from its generator frame to its grid slot.
///
/// A point `p` goes to `((p.x − x_left)·sx, (p.y − y_near)·sy, p.z·sz − ground)`,
/// is turned `rotation` quarter turns about the footprint center, then
/// shifted by `translation`. `sz = √(sx·sy)` also scales gaussian sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileTransform {
    pub cuts: CutSet,
    pub scale: [f64; 3],
    pub ground: f64,
    pub rotation: u8,
    pub translation: [f64; 2],
}

impl TileTransform {
    pub fn from_cuts(cuts: CutSet) -> Self {
        let sx = 1.0 / cuts.width();
        let sy = 1.0 / cuts.depth();
        Self {
            cuts,
            scale: [sx, sy, (sx * sy).sqrt()],
            ground: 0.0,
            rotation: 0,
            translation: [0.0, 0.0],
        }
    }

    pub fn placed_at(self, slot: TileCoord) -> Self {
        Self {
            translation: [slot.x as f64, slot.y as f64],
            ..self
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [
            (p[0] - self.cuts.x_left) * self.scale[0],
            (p[1] - self.cuts.y_near) * self.scale[1],
            p[2] * self.scale[2] - self.ground,
        ];
        let (dx, dy) = rotate_quarter_xy(q[0] - 0.5, q[1] - 0.5, self.rotation);
        [
            0.5 + dx + self.translation[0],
            0.5 + dy + self.translation[1],
            q[2],
        ]
    }

    /// `(A, b)` with `apply_point(p) = A·p + b`.
    pub fn affine(&self) -> (Matrix3<f64>, [f64; 3]) {
        let b = self.apply_point([0.0; 3]);
        let cols = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].map(|e| {
            let p = self.apply_point(e);
            [p[0] - b[0], p[1] - b[1], p[2] - b[2]]
        });
        let a = Matrix3::new(
            cols[0][0], cols[1][0], cols[2][0], cols[0][1], cols[1][1], cols[2][1], cols[0][2],
            cols[1][2], cols[2][2],
        );
        (a, b)
    }

    /// Image of the cut rectangle on the ground plane, `(min, max)`.
    pub fn footprint(&self) -> ([f64; 2], [f64; 2]) {
        let corners = [
            [self.cuts.x_left, self.cuts.y_near],
            [self.cuts.x_right, self.cuts.y_near],
            [self.cuts.x_left, self.cuts.y_far],
            [self.cuts.x_right, self.cuts.y_far],
        ]
        .map(|c| self.apply_point([c[0], c[1], 0.0]));
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in corners {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        (lo, hi)
    }

    /// Crops to the cut rectangle and maps the survivors.
    pub fn apply(&self, splats: &SplatSet) -> SplatSet {
        let cropped = crop_to_cuts(splats, &self.cuts);
        let local = SplatSet::new(cropped.iter().map(|g| self.to_local(g)).collect());
        local
            .rotated_quarter(self.rotation, [0.5, 0.5])
            .translated([self.translation[0], self.translation[1], 0.0])
    }

    fn to_local(&self, g: &Gaussian) -> Gaussian {
        let mut g = *g;
        let c = g.center.map(f64::from);
        g.center = [
            ((c[0] - self.cuts.x_left) * self.scale[0]) as f32,
            ((c[1] - self.cuts.y_near) * self.scale[1]) as f32,
            (c[2] * self.scale[2] - self.ground) as f32,
        ];
        g.scale = g.scale.map(|s| (s as f64 * self.scale[2]) as f32);
        g
    }
}

/// Gaussians whose centers lie in `[x_left, x_right) × [y_near, y_far)`.
pub fn crop_to_cuts(splats: &SplatSet, cuts: &CutSet) -> SplatSet {
    SplatSet::new(
        splats
            .iter()
            .filter(|g| {
                let (x, y) = (g.center[0] as f64, g.center[1] as f64);
                x >= cuts.x_left && x < cuts.x_right && y >= cuts.y_near && y < cuts.y_far
            })
            .copied()
            .collect(),
    )
}

/// Keeps gaussians inside the cut rectangle and maps it onto the unit
/// square `[0, 1)²` of the tile's local frame.
pub fn normalize_tile(
    splats: &SplatSet,
    cuts: &CutSet,
) -> Result<(SplatSet, TileTransform), SplatPostError> {
    cuts.check()?;
    let t = TileTransform::from_cuts(*cuts);
    let out = t.apply(splats);
    if out.is_empty() {
        return Err(SplatPostError::Degenerate);
    }
    Ok((out, t))
}

/// Mean over the four footprint corners of the lowest gaussian center found
/// in a `patch`-sized square at each corner. Empty corners are skipped.
pub fn ground_height(splats: &SplatSet, patch: f64) -> Result<f64, SplatPostError> {
    let mut lows = [f64::INFINITY; 4];
    for g in splats.iter() {
        let (x, y, z) = (g.center[0] as f64, g.center[1] as f64, g.center[2] as f64);
        let cx = if x < patch {
            Some(0)
        } else if x >= 1.0 - patch {
            Some(1)
        } else {
            None
        };
        let cy = if y < patch {
            Some(0)
        } else if y >= 1.0 - patch {
            Some(2)
        } else {
            None
        };
        if let (Some(a), Some(b)) = (cx, cy) {
            lows[a + b] = lows[a + b].min(z);
        }
    }
    let found: Vec<f64> = lows.into_iter().filter(|v| v.is_finite()).collect();
    if found.is_empty() {
        return Err(SplatPostError::GroundDetection);
    }
    Ok(found.iter().sum::<f64>() / found.len() as f64)
}

/// Target for reorientation: an image in the camera's frame and the pixel
/// rectangle to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorientTarget {
    pub image: RgbaImage,
    pub rect: PixelRect,
}

/// Flattens RGBA onto opaque black so silhouettes count.
pub fn flatten(img: &RgbaImage) -> RgbaImage {
    RgbaImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let a = p[3] as u32;
        let f = |c: u8| ((c as u32 * a + 127) / 255) as u8;
        image::Rgba([f(p[0]), f(p[1]), f(p[2]), 255])
    })
}

/// Renders the unit tile at `slot` under each quarter turn about its center
/// and returns the turn minimizing `distance` to the target, with the four
/// distances. Ties go to the smallest turn.
pub fn reorient(
    tile: &SplatSet,
    target: &ReorientTarget,
    camera: &IsometricCamera,
    slot: TileCoord,
    distance: &dyn ImageDistance,
) -> Result<(u8, [f64; 4]), SplatPostError> {
    let reference = flatten(&raster::crop(&target.image, target.rect));
    let mut scores = [0.0; 4];
    let mut best = 0u8;
    for k in 0..4u8 {
        let placed =
            tile.rotated_quarter(k, [0.5, 0.5])
                .translated([slot.x as f64, slot.y as f64, 0.0]);
        let render = isorender::render_splats(&placed, camera)?;
        let candidate = flatten(&raster::crop(&render.pixels, target.rect));
        scores[k as usize] = distance.distance(&candidate, &reference)?;
        if scores[k as usize] < scores[best as usize] {
            best = k;
        }
    }
    Ok((best, scores))
}
