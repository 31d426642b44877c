//! Sparse latent volumes: cropping, seam stitching, band-masked denoising
//! and multi-view latent upsampling.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::occupancy::OccupancyVolume;

pub const DEFAULT_BAND_HALF_WIDTH: usize = 8;
pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("crop leaves no cells")]
    DegenerateCrop,
    #[error("non-finite features at step {step}")]
    NonFinite { step: usize },
    #[error("denoiser failed at step {step}: {message}")]
    Denoiser { step: usize, message: String },
    #[error("latent format: {0}")]
    Format(String),
    #[error("latent I/O: {0}")]
    Io(#[from] io::Error),
}

pub type Cell = [u16; 3];

/// Affine map from voxel indices to world space: the center of cell `i`
/// sits at `origin + axes · (i + 0.5)`, where `axes[k]` is the world
/// vector spanned by one step along index axis `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelFrame {
    pub origin: [f64; 3],
    pub axes: [[f64; 3]; 3],
}

impl VoxelFrame {
    /// The generator's canonical frame: `dims` cells spanning [−0.5, 0.5]³.
    pub fn unit_cube(dims: [usize; 3]) -> Self {
        let mut axes = [[0.0; 3]; 3];
        for k in 0..3 {
            axes[k][k] = 1.0 / dims[k] as f64;
        }
        Self {
            origin: [-0.5; 3],
            axes,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&self.axes.map(Vector3::from))
    }

    fn from_parts(origin: Vector3<f64>, m: Matrix3<f64>) -> Self {
        let axes = [0, 1, 2].map(|k| [m[(0, k)], m[(1, k)], m[(2, k)]]);
        Self {
            origin: [origin.x, origin.y, origin.z],
            axes,
        }
    }

    /// World position of continuous cell coordinate `c` (cell centers at
    /// half-integers).
    pub fn point(&self, c: [f64; 3]) -> [f64; 3] {
        let p = Vector3::from(self.origin) + self.matrix() * Vector3::from(c);
        [p.x, p.y, p.z]
    }

    pub fn cell_center(&self, cell: Cell) -> [f64; 3] {
        self.point(cell.map(|i| i as f64 + 0.5))
    }

    /// Continuous cell coordinate of a world point; `None` for a singular frame.
    pub fn coordinate(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let inv = self.matrix().try_inverse()?;
        let c = inv * (Vector3::from(p) - Vector3::from(self.origin));
        Some([c.x, c.y, c.z])
    }

    /// Applies the world-space affine map `p ↦ a·p + b`.
    pub fn transformed(&self, a: &Matrix3<f64>, b: [f64; 3]) -> Self {
        let o = a * Vector3::from(self.origin) + Vector3::from(b);
        Self::from_parts(o, a * self.matrix())
    }

    /// Frame of the sub-box starting at integer offset `lo`.
    pub fn shifted(&self, lo: [f64; 3]) -> Self {
        let o = Vector3::from(self.origin) + self.matrix() * Vector3::from(lo);
        Self::from_parts(o, self.matrix())
    }

    /// Edge length of one cell along each index axis, in world units.
    pub fn cell_size(&self) -> [f64; 3] {
        self.axes
            .map(|a| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt())
    }
}

/// D-channel features on the occupied cells of a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatentVolume {
    dims: [usize; 3],
    channels: usize,
    cells: BTreeMap<Cell, Vec<f32>>,
    pub frame: VoxelFrame,
}

impl SparseLatentVolume {
    pub fn new(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            cells: BTreeMap::new(),
            frame: VoxelFrame::unit_cube(dims),
        }
    }

    pub fn cubic(resolution: usize, channels: usize) -> Self {
        Self::new([resolution; 3], channels)
    }

    pub fn with_frame(mut self, frame: VoxelFrame) -> Self {
        self.frame = frame;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    pub fn resolution(&self) -> usize {
        self.dims[0]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn insert(&mut self, cell: Cell, features: Vec<f32>) -> Result<(), LatentError> {
        if features.len() != self.channels {
            return Err(LatentError::Shape(format!(
                "expected {} channels, got {}",
                self.channels,
                features.len()
            )));
        }
        if (0..3).any(|k| cell[k] as usize >= self.dims[k]) {
            return Err(LatentError::Shape(format!(
                "cell {cell:?} outside {:?}",
                self.dims
            )));
        }
        self.cells.insert(cell, features);
        Ok(())
    }

    pub fn get(&self, cell: Cell) -> Option<&[f32]> {
        self.cells.get(&cell).map(Vec::as_slice)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.cells.contains_key(&cell)
    }

    /// Cells in ascending `(x, y, z)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&Cell, &Vec<f32>)> {
        self.cells.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&Cell, &mut Vec<f32>)> {
        self.cells.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Cell> {
        self.cells.keys()
    }

    /// Occupancy of the same shape; active exactly on the stored cells.
    pub fn occupancy(&self) -> OccupancyVolume {
        let mut v = OccupancyVolume::with_dims(self.dims);
        for c in self.cells.keys() {
            v.set(c[0] as usize, c[1] as usize, c[2] as usize, true);
        }
        v
    }

    /// Same cells and frame with new features.
    pub fn map_features(&self, mut f: impl FnMut(&Cell, &[f32]) -> Vec<f32>) -> Self {
        let cells = self.cells.iter().map(|(c, v)| (*c, f(c, v))).collect();
        Self {
            cells,
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Self {
        Self {
            dims: self.dims,
            channels: self.channels,
            cells: BTreeMap::new(),
            frame: self.frame,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.cells.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn same_cells(&self, other: &SparseLatentVolume) -> bool {
        self.dims == other.dims && self.cells.keys().eq(other.cells.keys())
    }

    /// Quarter turns of the index grid about the vertical axis; one turn
    /// maps `(i, j)` to `(R−1−j, i)`. The frame is updated so every cell
    /// keeps its world position.
    pub fn rotate_indices(&self, k: u8) -> Result<SparseLatentVolume, LatentError> {
        if self.dims[0] != self.dims[1] {
            return Err(LatentError::Shape(format!(
                "quarter turns need equal horizontal sides, got {:?}",
                self.dims
            )));
        }
        let mut out = self.clone();
        for _ in 0..k % 4 {
            out = out.rotate_once();
        }
        Ok(out)
    }

    fn rotate_once(&self) -> SparseLatentVolume {
        let r = self.dims[0];
        let cells = self
            .cells
            .iter()
            .map(|(c, v)| ([(r - 1 - c[1] as usize) as u16, c[0], c[2]], v.clone()))
            .collect();
        // New continuous coordinate c' = Q·c + t with Q = [[0,−1],[1,0]], t = (R, 0).
        let q_inv = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let t = Vector3::new(r as f64, 0.0, 0.0);
        let m = self.frame.matrix() * q_inv;
        let o = Vector3::from(self.frame.origin) - m * t;
        Self {
            cells,
            frame: VoxelFrame::from_parts(o, m),
            ..self.clone_empty()
        }
    }

    /// Cells inside the index box `[lo, hi)`, re-indexed from `lo`.
    pub fn crop_box(
        &self,
        lo: [usize; 3],
        hi: [usize; 3],
    ) -> Result<SparseLatentVolume, LatentError> {
        if (0..3).any(|k| lo[k] >= hi[k] || hi[k] > self.dims[k]) {
            return Err(LatentError::DegenerateCrop);
        }
        let dims = [0, 1, 2].map(|k| hi[k] - lo[k]);
        let cells: BTreeMap<Cell, Vec<f32>> = self
            .cells
            .iter()
            .filter(|(c, _)| (0..3).all(|k| (c[k] as usize) >= lo[k] && (c[k] as usize) < hi[k]))
            .map(|(c, v)| ([0, 1, 2].map(|k| (c[k] as usize - lo[k]) as u16), v.clone()))
            .collect();
        if cells.is_empty() {
            return Err(LatentError::DegenerateCrop);
        }
        Ok(Self {
            dims,
            channels: self.channels,
            cells,
            frame: self.frame.shifted(lo.map(|v| v as f64)),
        })
    }
}

/// `round(unit · R)` with halves rounded away from zero.
pub fn voxel_cut(unit: f64, resolution: usize) -> i64 {
    (unit * resolution as f64).round() as i64
}

/// Horizontal crop in unit coordinates of the volume (0 = low face, 1 = high
/// face); the vertical extent is kept whole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCrop {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

pub fn crop_latents(
    volume: &SparseLatentVolume,
    crop: UnitCrop,
) -> Result<SparseLatentVolume, LatentError> {
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    let [dx, dy, dz] = volume.dims;
    let lo = [
        clamp(voxel_cut(crop.x[0], dx), dx),
        clamp(voxel_cut(crop.y[0], dy), dy),
        0,
    ];
    let hi = [
        clamp(voxel_cut(crop.x[1], dx), dx),
        clamp(voxel_cut(crop.y[1], dy), dy),
        dz,
    ];
    volume.crop_box(lo, hi)
}

/// Which edge two tiles share. For `NorthSouth`, `a` is the northern tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeamOrientation {
    EastWest,
    NorthSouth,
}

impl SeamOrientation {
    /// Index quarter turns that bring the shared edge onto the x axis.
    pub fn canonical_turns(self) -> u8 {
        match self {
            SeamOrientation::EastWest => 0,
            SeamOrientation::NorthSouth => 3,
        }
    }
}

/// Right half of `a` abutting the left half of `b`; the seam lands on the
/// `x = R/2` plane. The result uses `a`'s frame shifted by half a volume.
pub fn stitch(
    a: &SparseLatentVolume,
    b: &SparseLatentVolume,
) -> Result<SparseLatentVolume, LatentError> {
    if !a.is_cubic() || !b.is_cubic() || a.dims != b.dims {
        return Err(LatentError::Shape(format!(
            "stitch needs equal cubic volumes, got {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    if a.channels != b.channels {
        return Err(LatentError::Shape(format!(
            "channel counts differ: {} vs {}",
            a.channels, b.channels
        )));
    }
    let r = a.dims[0];
    if r % 2 != 0 {
        return Err(LatentError::Shape(format!(
            "stitch needs an even resolution, got {r}"
        )));
    }
    let half = (r / 2) as u16;
    let mut cells = BTreeMap::new();
    for (c, v) in a.cells.range([half, 0, 0]..) {
        cells.insert([c[0] - half, c[1], c[2]], v.clone());
    }
    for (c, v) in b.cells.range(..[half, 0, 0]) {
        cells.insert([c[0] + half, c[1], c[2]], v.clone());
    }
    Ok(SparseLatentVolume {
        dims: a.dims,
        channels: a.channels,
        cells,
        frame: a.frame.shifted([(r / 2) as f64, 0.0, 0.0]),
    })
}

/// Rotates both volumes into the east-west frame, then stitches.
pub fn stitch_pair(
    a: &SparseLatentVolume,
    b: &SparseLatentVolume,
    orientation: SeamOrientation,
) -> Result<SparseLatentVolume, LatentError> {
    let k = orientation.canonical_turns();
    stitch(&a.rotate_indices(k)?, &b.rotate_indices(k)?)
}

/// Linear noise schedule with `steps` steps: σ_t = 1 − t/T, so σ_0 = 1 is
/// pure noise and σ_T = 0 is clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub seed: u64,
}

impl NoiseSchedule {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, seed }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        1.0 - t.min(self.steps) as f64 / self.steps as f64
    }

    /// Standard normal noise per cell and channel, in cell order.
    pub fn noise(&self, volume: &SparseLatentVolume) -> SparseLatentVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        volume.map_features(|_, v| {
            (0..v.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
    }

    /// `(1 − σ_t)·γ + σ_t·ε`; exactly `γ` at the final step.
    pub fn noised(
        &self,
        clean: &SparseLatentVolume,
        noise: &SparseLatentVolume,
        t: usize,
    ) -> SparseLatentVolume {
        let s = self.sigma(t) as f32;
        if s == 0.0 {
            return clean.clone();
        }
        clean.map_features(|c, v| {
            let e = noise.get(*c).expect("noise covers every cell");
            v.iter()
                .zip(e)
                .map(|(x, n)| (1.0 - s) * x + s * n)
                .collect()
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_STEPS, 0)
    }
}

/// One denoising step's output. `weights`, when present, gives per-cell
/// confidence in cell order; cells with weight 0 carry no opinion.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseStep {
    pub latents: SparseLatentVolume,
    pub weights: Option<Vec<f32>>,
}

/// A latent denoiser bound to its conditioning.
pub trait Denoiser {
    /// Maps latents at step `t` to latents at step `t + 1`.
    fn step(
        &self,
        latents: &SparseLatentVolume,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<DenoiseStep, String>;
}

fn in_band(x: u16, r: usize, resolution: usize) -> bool {
    (2 * x as i64 - resolution as i64).unsigned_abs() <= 2 * r as u64
}

/// Re-denoises the band `|x − R/2| ≤ r` of a stitched volume from fresh
/// noise while every other cell follows the noised original; after the last
/// step the outside region equals the input bit for bit. Occupancy is fixed.
pub fn blend_band(
    volume: &SparseLatentVolume,
    r: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<SparseLatentVolume, LatentError> {
    let res = volume.dims[0];
    if 2 * r >= res {
        return Err(LatentError::Param(format!(
            "band half-width {r} must be below R/2 = {}",
            res / 2
        )));
    }
    if schedule.steps == 0 {
        return Err(LatentError::Param(
            "schedule needs at least one step".into(),
        ));
    }
    let noise = schedule.noise(volume);
    let mut x = schedule.noised(volume, &noise, 0);
    for t in 0..schedule.steps {
        let out = denoiser
            .step(&x, t, schedule)
            .map_err(|message| LatentError::Denoiser { step: t, message })?;
        if !out.latents.same_cells(&x) || out.latents.channels != x.channels {
            return Err(LatentError::Shape(format!(
                "denoiser changed the cell set at step {t}"
            )));
        }
        let reset = schedule.noised(volume, &noise, t + 1);
        let mut next = reset;
        for (c, v) in next.cells.iter_mut() {
            if in_band(c[0], r, res) {
                let d = out.latents.get(*c).expect("same cells");
                if d.iter().any(|f| !f.is_finite()) {
                    return Err(LatentError::NonFinite { step: t });
                }
                v.copy_from_slice(d);
            }
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    /// Trilinear interpolation of the binary grid, thresholded at 0.5.
    Trilinear,
}

/// Scales an occupancy grid to `target` with per-axis factors.
pub fn upsample_occupancy(
    occ: &OccupancyVolume,
    target: [usize; 3],
    mode: UpsampleMode,
) -> OccupancyVolume {
    let src = occ.dims();
    let mut out = OccupancyVolume::with_dims(target);
    let coord = |i: usize, k: usize| (i as f64 + 0.5) * src[k] as f64 / target[k] as f64;
    for w in 0..target[2] {
        for v in 0..target[1] {
            for u in 0..target[0] {
                let on = match mode {
                    UpsampleMode::Nearest => {
                        let s = [coord(u, 0), coord(v, 1), coord(w, 2)].map(|c| c.floor() as usize);
                        occ.get(
                            s[0].min(src[0] - 1),
                            s[1].min(src[1] - 1),
                            s[2].min(src[2] - 1),
                        )
                    }
                    UpsampleMode::Trilinear => {
                        trilinear(
                            occ,
                            [coord(u, 0) - 0.5, coord(v, 1) - 0.5, coord(w, 2) - 0.5],
                        ) >= 0.5
                    }
                };
                if on {
                    out.set(u, v, w, true);
                }
            }
        }
    }
    out
}

fn trilinear(occ: &OccupancyVolume, p: [f64; 3]) -> f64 {
    let dims = occ.dims();
    let base = p.map(|c| c.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let idx: [i64; 3] =
            [0, 1, 2].map(|k| (base[k] as i64 + off[k] as i64).clamp(0, dims[k] as i64 - 1));
        let w: f64 = (0..3)
            .map(|k| if off[k] == 1 { frac[k] } else { 1.0 - frac[k] })
            .product();
        if occ.get(idx[0] as usize, idx[1] as usize, idx[2] as usize) {
            acc += w;
        }
    }
    acc
}

/// Upsamples a cropped volume to `resolution`³ and denoises fresh latents on
/// the new occupancy. Each step applies the mean of the per-view updates,
/// weighted by any per-cell view weights.
pub fn upsample_latents(
    cropped: &SparseLatentVolume,
    resolution: usize,
    views: &[&dyn Denoiser],
    schedule: &NoiseSchedule,
    mode: UpsampleMode,
) -> Result<SparseLatentVolume, LatentError> {
    if views.is_empty() {
        return Err(LatentError::Param(
            "upsampling needs at least one conditioning view".into(),
        ));
    }
    if cropped.is_empty() {
        return Err(LatentError::DegenerateCrop);
    }
    let target = [resolution; 3];
    let occ = upsample_occupancy(&cropped.occupancy(), target, mode);
    let src = cropped.dims;
    let mut axes = cropped.frame.axes;
    for k in 0..3 {
        let f = src[k] as f64 / resolution as f64;
        axes[k] = axes[k].map(|a| a * f);
    }
    let frame = VoxelFrame {
        origin: cropped.frame.origin,
        axes,
    };
    let mut shell = SparseLatentVolume::new(target, cropped.channels).with_frame(frame);
    let zeros = vec![0.0; cropped.channels];
    for [u, v, w] in occ.active() {
        shell
            .cells
            .insert([u as u16, v as u16, w as u16], zeros.clone());
    }
    if shell.is_empty() {
        return Err(LatentError::DegenerateCrop);
    }
    let mut x = schedule.noise(&shell);
    let n = x.len();
    for t in 0..schedule.steps {
        let mut sum = vec![0f64; n * x.channels];
        let mut wsum = vec![0f64; n];
        for view in views {
            let out = view
                .step(&x, t, schedule)
                .map_err(|message| LatentError::Denoiser { step: t, message })?;
            if !out.latents.same_cells(&x) {
                return Err(LatentError::Shape(format!(
                    "denoiser changed the cell set at step {t}"
                )));
            }
            if out.weights.as_ref().is_some_and(|w| w.len() != n) {
                return Err(LatentError::Shape(format!(
                    "weight count mismatch at step {t}"
                )));
            }
            for (i, ((_, cur), (_, next))) in
                x.cells.iter().zip(out.latents.cells.iter()).enumerate()
            {
                let w = out.weights.as_ref().map_or(1.0, |w| w[i] as f64);
                if w == 0.0 {
                    continue;
                }
                wsum[i] += w;
                for ch in 0..cur.len() {
                    sum[i * cur.len() + ch] += w * (next[ch] as f64 - cur[ch] as f64);
                }
            }
        }
        for (i, (_, cur)) in x.cells.iter_mut().enumerate() {
            if wsum[i] == 0.0 {
                continue;
            }
            for ch in 0..cur.len() {
                cur[ch] += (sum[i * cur.len() + ch] / wsum[i]) as f32;
            }
        }
        if !x.all_finite() {
            return Err(LatentError::NonFinite { step: t });
        }
    }
    Ok(x)
}

const SLAT_MAGIC: &[u8; 4] = b"SLAT";
pub const SLAT_VERSION: u16 = 1;

/// Header (magic, version, R, D, cell count) followed by per-cell records of
/// three u16 indices and D little-endian f32 values. The frame is not stored.
pub fn write_slat(volume: &SparseLatentVolume, mut out: impl Write) -> Result<(), LatentError> {
    if !volume.is_cubic() {
        return Err(LatentError::Format(format!(
            "cannot encode non-cubic volume {:?}",
            volume.dims
        )));
    }
    let r = u16::try_from(volume.dims[0])
        .map_err(|_| LatentError::Format("resolution exceeds u16".into()))?;
    let d = u16::try_from(volume.channels)
        .map_err(|_| LatentError::Format("channel count exceeds u16".into()))?;
    let mut buf = Vec::with_capacity(18 + volume.len() * (6 + 4 * volume.channels));
    buf.extend_from_slice(SLAT_MAGIC);
    buf.extend_from_slice(&SLAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&r.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&(volume.len() as u64).to_le_bytes());
    for (c, v) in &volume.cells {
        for i in c {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        for f in v {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn encode_slat(volume: &SparseLatentVolume) -> Result<Vec<u8>, LatentError> {
    let mut out = Vec::new();
    write_slat(volume, &mut out)?;
    Ok(out)
}

pub fn read_slat(mut input: impl Read) -> Result<SparseLatentVolume, LatentError> {
    let mut header = [0u8; 18];
    input
        .read_exact(&mut header)
        .map_err(|e| LatentError::Format(format!("short header: {e}")))?;
    if &header[..4] != SLAT_MAGIC {
        return Err(LatentError::Format("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
    if u16_at(4) != SLAT_VERSION {
        return Err(LatentError::Format(format!(
            "unsupported version {}",
            u16_at(4)
        )));
    }
    let (r, d) = (u16_at(6) as usize, u16_at(8) as usize);
    let count = u64::from_le_bytes(header[10..18].try_into().expect("8 bytes"));
    let record = 6 + 4 * d;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() as u64 != count * record as u64 {
        return Err(LatentError::Format(format!(
            "expected {count} records of {record} bytes, got {} bytes",
            body.len()
        )));
    }
    let mut volume = SparseLatentVolume::cubic(r, d);
    for chunk in body.chunks_exact(record) {
        let cell = [0, 1, 2].map(|k| u16::from_le_bytes([chunk[2 * k], chunk[2 * k + 1]]));
        let features: Vec<f32> = chunk[6..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if features.iter().any(|f| !f.is_finite()) {
            return Err(LatentError::Format(format!(
                "non-finite features at {cell:?}"
            )));
        }
        if volume.contains(cell) {
            return Err(LatentError::Format(format!("duplicate cell {cell:?}")));
        }
        volume
            .insert(cell, features)
            .map_err(|e| LatentError::Format(e.to_string()))?;
    }
    Ok(volume)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Linear pull toward fixed targets: x' = a·x + (1 − a)·target with
    /// a = σ_{t+1}/σ_t.
    pub(crate) struct PullToward(pub SparseLatentVolume);

    impl Denoiser for PullToward {
        fn step(
            &self,
            x: &SparseLatentVolume,
            t: usize,
            s: &NoiseSchedule,
        ) -> Result<DenoiseStep, String> {
            let (s0, s1) = (s.sigma(t), s.sigma(t + 1));
            let latents = x.map_features(|c, v| {
                let target = self.0.get(*c).expect("target covers every cell");
                if s1 == 0.0 {
                    return target.to_vec();
                }
                let a = (s1 / s0) as f32;
                v.iter()
                    .zip(target)
                    .map(|(x, g)| a * x + (1.0 - a) * g)
                    .collect()
            });
            Ok(DenoiseStep {
                latents,
                weights: None,
            })
        }
    }

    pub(crate) fn random_dense(r: usize, d: usize, rng: &mut impl Rng) -> SparseLatentVolume {
        let mut v = SparseLatentVolume::cubic(r, d);
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    v.insert(
                        [x as u16, y as u16, z as u16],
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap();
                }
            }
        }
        v
    }

    fn constant(r: usize, value: f32) -> SparseLatentVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        random_dense(r, 1, &mut rng).map_features(|_, _| vec![value])
    }

    #[test]
    fn crop_rounding() {
        assert_eq!(voxel_cut(0.125, 64), 8);
        assert_eq!(voxel_cut(0.875, 64), 56);
        assert_eq!(voxel_cut(0.1, 64), 6);
        assert_eq!(voxel_cut(0.5 / 64.0, 64), 1);
        let v = constant(64, 1.0);
        let c = crop_latents(
            &v,
            UnitCrop {
                x: [0.125, 0.875],
                y: [0.125, 0.875],
            },
        )
        .unwrap();
        assert_eq!(c.dims(), [48, 48, 64]);
        assert_eq!(c.len(), 48 * 48 * 64);
        let full = crop_latents(
            &v,
            UnitCrop {
                x: [0.0, 1.0],
                y: [0.0, 1.0],
            },
        )
        .unwrap();
        assert_eq!(full, v);
        assert!(matches!(
            crop_latents(
                &v,
                UnitCrop {
                    x: [0.5, 0.5],
                    y: [0.0, 1.0]
                }
            ),
            Err(LatentError::DegenerateCrop)
        ));
    }

    #[test]
    fn crop_keeps_world_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_dense(8, 2, &mut rng);
        let c = v.crop_box([2, 1, 0], [6, 7, 8]).unwrap();
        for (cell, f) in c.iter() {
            let orig = [cell[0] + 2, cell[1] + 1, cell[2]];
            assert_eq!(v.get(orig).unwrap(), f.as_slice());
            let (a, b) = (c.frame.cell_center(*cell), v.frame.cell_center(orig));
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn stitch_profile() {
        let s = stitch(&constant(4, 1.0), &constant(4, 2.0)).unwrap();
        let profile: Vec<f32> = (0..4).map(|x| s.get([x, 0, 0]).unwrap()[0]).collect();
        assert_eq!(profile, vec![1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            stitch(&constant(4, 1.0), &constant(8, 1.0)),
            Err(LatentError::Shape(_))
        ));
    }

    #[test]
    fn stitch_of_translation_symmetric_content_matches_across_seam() {
        let mut v = SparseLatentVolume::cubic(8, 1);
        for x in 0..8u16 {
            for y in 0..8u16 {
                v.insert([x, y, 0], vec![y as f32]).unwrap();
            }
        }
        let s = stitch(&v, &v).unwrap();
        for y in 0..8u16 {
            assert_eq!(s.get([3, y, 0]), s.get([4, y, 0]));
        }
    }

    #[test]
    fn rotation_preserves_world_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_dense(6, 1, &mut rng);
        for k in 0..4 {
            let r = v.rotate_indices(k).unwrap();
            for (cell, f) in v.iter() {
                let p = v.frame.cell_center(*cell);
                let c = r
                    .frame
                    .coordinate(p)
                    .unwrap()
                    .map(|x| (x - 0.5).round() as u16);
                assert_eq!(r.get(c).unwrap(), f.as_slice());
            }
        }
        let one = v.rotate_indices(1).unwrap();
        assert_eq!(one.get([5, 0, 0]), v.get([0, 0, 0]));
        assert_eq!(v.rotate_indices(4).unwrap(), v);
    }

    #[test]
    fn north_south_pairs_stitch_after_canonical_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_dense(8, 2, &mut rng), random_dense(8, 2, &mut rng));
        let ns = stitch_pair(&a, &b, SeamOrientation::NorthSouth).unwrap();
        let oracle = stitch(&a.rotate_indices(3).unwrap(), &b.rotate_indices(3).unwrap()).unwrap();
        assert_eq!(ns, oracle);
        // The southern half of the northern tile ends up west of the seam.
        assert_eq!(ns.get([0, 0, 0]), a.get([7, 4, 0]));
    }

    #[test]
    fn band_extent() {
        let planes: Vec<u16> = (0..64).filter(|x| in_band(*x, 8, 64)).collect();
        assert_eq!(planes, (24..=40).collect::<Vec<_>>());
        let planes: Vec<u16> = (0..64).filter(|x| in_band(*x, 0, 64)).collect();
        assert_eq!(planes, vec![32]);
    }

    #[test]
    fn blend_with_identity_pull_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_dense(8, 3, &mut rng);
        let out = blend_band(&v, 2, &PullToward(v.clone()), &NoiseSchedule::new(32, 9)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn blend_band_width_zero_touches_one_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_dense(8, 2, &mut rng);
        let target = v.map_features(|_, f| f.iter().map(|x| x + 1.0).collect());
        let out = blend_band(
            &v,
            0,
            &PullToward(target.clone()),
            &NoiseSchedule::new(32, 1),
        )
        .unwrap();
        for (c, f) in out.iter() {
            let want = if c[0] == 4 { target.get(*c) } else { v.get(*c) };
            assert_eq!(Some(f.as_slice()), want);
        }
        assert!(matches!(
            blend_band(&v, 4, &PullToward(v.clone()), &NoiseSchedule::default()),
            Err(LatentError::Param(_))
        ));
    }

    struct Exploding;

    impl Denoiser for Exploding {
        fn step(
            &self,
            x: &SparseLatentVolume,
            t: usize,
            _: &NoiseSchedule,
        ) -> Result<DenoiseStep, String> {
            let latents = x.map_features(|_, v| {
                v.iter()
                    .map(|f| if t == 3 { f32::NAN } else { *f })
                    .collect()
            });
            Ok(DenoiseStep {
                latents,
                weights: None,
            })
        }
    }

    #[test]
    fn non_finite_output_names_the_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_dense(4, 1, &mut rng);
        assert!(matches!(
            blend_band(&v, 1, &Exploding, &NoiseSchedule::default()),
            Err(LatentError::NonFinite { step: 3 })
        ));
    }

    #[test]
    fn solid_boxes_upsample_exactly() {
        let cropped = constant(64, 0.0).crop_box([8, 8, 8], [56, 56, 56]).unwrap();
        let up = upsample_occupancy(&cropped.occupancy(), [64; 3], UpsampleMode::Nearest);
        assert_eq!(up.count(), 64 * 64 * 64);
        let tri = upsample_occupancy(&cropped.occupancy(), [64; 3], UpsampleMode::Trilinear);
        assert_eq!(tri.count(), 64 * 64 * 64);
    }

    #[test]
    fn upsampled_latents_follow_the_views() {
        let cropped = constant(8, 0.0).crop_box([0, 0, 0], [6, 6, 8]).unwrap();
        let shell = upsample_latents(
            &cropped,
            8,
            &[&PullToward(constant(8, 0.5))],
            &NoiseSchedule::new(8, 2),
            UpsampleMode::Nearest,
        )
        .unwrap();
        assert_eq!(shell.len(), 512);
        assert!(shell.iter().all(|(_, f)| f[0] == 0.5));
        // Two identical views give the same result as one.
        let one = PullToward(constant(8, 0.25));
        let a = upsample_latents(
            &cropped,
            8,
            &[&one],
            &NoiseSchedule::new(8, 2),
            UpsampleMode::Nearest,
        )
        .unwrap();
        let b = upsample_latents(
            &cropped,
            8,
            &[&one, &one],
            &NoiseSchedule::new(8, 2),
            UpsampleMode::Nearest,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            upsample_latents(
                &cropped,
                8,
                &[],
                &NoiseSchedule::default(),
                UpsampleMode::Nearest
            ),
            Err(LatentError::Param(_))
        ));
        // The upsampled frame spans the same world box as the crop.
        let lo = cropped.frame.point([0.0; 3]);
        let hi = cropped.frame.point([6.0, 6.0, 8.0]);
        assert_eq!(a.frame.point([0.0; 3]), lo);
        let hi2 = a.frame.point([8.0; 3]);
        assert!((0..3).all(|k| (hi[k] - hi2[k]).abs() < 1e-12));
    }

    fn arb_sparse() -> impl Strategy<Value = SparseLatentVolume> {
        (2usize..7, 1usize..4, any::<u64>()).prop_map(|(r, d, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = SparseLatentVolume::cubic(r, d);
            for x in 0..r {
                for y in 0..r {
                    for z in 0..r {
                        if rng.random_bool(0.3) {
                            v.insert(
                                [x as u16, y as u16, z as u16],
                                (0..d).map(|_| rng.random_range(-5.0..5.0)).collect(),
                            )
                            .unwrap();
                        }
                    }
                }
            }
            v
        })
    }

    proptest! {
        #[test]
        fn slat_round_trip(v in arb_sparse()) {
            prop_assert_eq!(read_slat(encode_slat(&v).unwrap().as_slice()).unwrap(), v);
        }

        #[test]
        fn crop_is_idempotent(v in arb_sparse(), a in 0.0f64..0.4, b in 0.6f64..1.0) {
            let crop = UnitCrop { x: [a, b], y: [a, b] };
            if let Ok(once) = crop_latents(&v, crop) {
                let whole = UnitCrop { x: [0.0, 1.0], y: [0.0, 1.0] };
                prop_assert_eq!(crop_latents(&once, whole).unwrap(), once);
            }
        }

        #[test]
        fn stitch_preserves_cell_counts(a in arb_sparse(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = a.dims()[0];
            prop_assume!(r % 2 == 0);
            let b = a.map_features(|_, f| f.iter().map(|x| x + rng.random_range(0.0..1.0f32)).collect());
            let s = stitch(&a, &b).unwrap();
            let half = (r / 2) as u16;
            let right = a.keys().filter(|c| c[0] >= half).count();
            let left = b.keys().filter(|c| c[0] < half).count();
            prop_assert_eq!(s.len(), right + left);
        }
    }

    #[test]
    fn slat_rejects_bad_input() {
        assert!(matches!(
            read_slat(&b"SLAX"[..]),
            Err(LatentError::Format(_))
        ));
        let v = constant(2, 1.0);
        let mut bytes = encode_slat(&v).unwrap();
        bytes.pop();
        assert!(matches!(
            read_slat(bytes.as_slice()),
            Err(LatentError::Format(_))
        ));
        let nc = SparseLatentVolume::new([2, 2, 3], 1);
        assert!(matches!(encode_slat(&nc), Err(LatentError::Format(_))));
    }
}
