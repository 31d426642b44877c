//! Deterministic procedural stand-ins for every generator role.
//!
//! A tile scene is a handful of colored voxel boxes on a lattice of
//! `CELLS_PER_TILE` cells per tile side, standing on a thin ground layer.
//! The 2D mock rasterizes the scene with the isometric renderer; the 3D mock
//! rebuilds it from the request provenance, adds a gray slab with a margin,
//! and emits exact splats, occupancy and latents in the generator frame.

use image::{GrayImage, Luma, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    DenoiseRequest, GenError, Image3DResult, ImageTo3d, Inpainter, LatentDenoiser, PromptExpander,
};
use crate::framing2d::{InpaintRequest, TileImagePrompt};
use crate::isorender::{self, FrameKind, FramedImage, SLAB_GRAY};
use crate::latentops::{DenoiseStep, SparseLatentVolume, VoxelFrame};
use crate::occupancy::OccupancyVolume;
use crate::raster;
use crate::splat::{Gaussian, SplatSet};
use crate::worldspec::{TileCoord, TilePrompt, WorldSpec, TILE_PROMPT_PLACEHOLDER};

pub const CELLS_PER_TILE: i32 = 48;
pub const GROUND_CELLS: i32 = 2;
pub const SLAB_MARGIN_CELLS: i32 = 5;
pub const SLAB_DEPTH_CELLS: i32 = 3;
pub const MOCK_RESOLUTION: usize = 64;
pub const MOCK_CHANNELS: usize = 8;
/// Opaque color shown where the base image is empty inside the mask.
pub const SKY: [u8; 3] = [170, 205, 235];

const GROUND_PALETTE: [[u8; 3]; 4] = [[34, 139, 34], [150, 90, 40], [230, 190, 60], [110, 210, 60]];
const OBJECT_PALETTE: [[u8; 3]; 8] = [
    [200, 60, 50],
    [60, 90, 200],
    [240, 240, 230],
    [20, 20, 30],
    [180, 40, 160],
    [40, 170, 170],
    [230, 120, 20],
    [90, 40, 120],
];

/// Injected generator failure, applied to the first `attempts` samples of
/// `tile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub tile: TileCoord,
    pub kind: FaultKind,
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum FaultKind {
    /// Sample turned by `k` quarter turns about the vertical axis.
    Rotation { k: u8 },
    /// A quarter of the base ring missing at the widest layer.
    BrokenBorder,
    /// Footprint truncated along one axis.
    OffSquare,
    /// Slab margin missing on the east side.
    MarginOverflow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Turn every 3D sample by a seed-derived number of quarter turns.
    #[serde(default)]
    pub random_rotation: bool,
}

/// Axis-aligned block of cells `[min, max)` in tile-local lattice units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelBox {
    pub min: [i32; 3],
    pub max: [i32; 3],
    pub color: [u8; 3],
}

impl VoxelBox {
    fn contains(&self, c: [i32; 3]) -> bool {
        (0..3).all(|k| c[k] >= self.min[k] && c[k] < self.max[k])
    }
}

/// Colored voxel scene; later boxes paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockScene {
    pub boxes: Vec<VoxelBox>,
}

fn scene_rng(prompt: &str, tile: TileCoord, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0]);
    h.update(tile.x.to_le_bytes());
    h.update(tile.y.to_le_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl MockScene {
    /// The scene for one tile: ground layer, a few boxes, and one box of a
    /// unique color in the north-west quadrant so no quarter turn maps the
    /// scene onto itself.
    pub fn generate(prompt: &str, tile: TileCoord, seed: u64) -> Self {
        let mut rng = scene_rng(prompt, tile, seed);
        let n = CELLS_PER_TILE;
        let ground = GROUND_PALETTE[rng.random_range(0..GROUND_PALETTE.len())];
        let mut boxes = vec![VoxelBox {
            min: [0, 0, 0],
            max: [n, n, GROUND_CELLS],
            color: ground,
        }];
        let marker = rng.random_range(0..OBJECT_PALETTE.len());
        let others = rng.random_range(1..=3);
        for _ in 0..others {
            let (w, d) = (rng.random_range(4..=14), rng.random_range(4..=14));
            let x0 = rng.random_range(3..=n - 3 - w);
            let y0 = rng.random_range(3..=n - 3 - d);
            let h = rng.random_range(3..=20);
            let mut c = rng.random_range(0..OBJECT_PALETTE.len() - 1);
            if c >= marker {
                c += 1;
            }
            boxes.push(VoxelBox {
                min: [x0, y0, GROUND_CELLS],
                max: [x0 + w, y0 + d, GROUND_CELLS + h],
                color: OBJECT_PALETTE[c],
            });
        }
        let (w, d) = (rng.random_range(4..=10), rng.random_range(4..=10));
        let (x0, y0) = (rng.random_range(3..=10), rng.random_range(3..=10));
        let h = rng.random_range(6..=22);
        boxes.push(VoxelBox {
            min: [x0, y0, GROUND_CELLS],
            max: [x0 + w, y0 + d, GROUND_CELLS + h],
            color: OBJECT_PALETTE[marker],
        });
        Self { boxes }
    }

    pub fn color_at(&self, c: [i32; 3]) -> Option<[u8; 3]> {
        self.boxes
            .iter()
            .rev()
            .find(|b| b.contains(c))
            .map(|b| b.color)
    }

    pub fn bounds(&self) -> ([i32; 3], [i32; 3]) {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for b in &self.boxes {
            for k in 0..3 {
                lo[k] = lo[k].min(b.min[k]);
                hi[k] = hi[k].max(b.max[k]);
            }
        }
        (lo, hi)
    }

    /// The scene on a gray slab that extends `SLAB_MARGIN_CELLS` past the
    /// tile (except east when `east_margin` is false).
    pub fn on_slab(&self, east_margin: bool) -> Self {
        let m = SLAB_MARGIN_CELLS;
        let east = if east_margin {
            CELLS_PER_TILE + m
        } else {
            CELLS_PER_TILE
        };
        let slab = VoxelBox {
            min: [-m, -m, -SLAB_DEPTH_CELLS],
            max: [east, CELLS_PER_TILE + m, 0],
            color: SLAB_GRAY,
        };
        let mut boxes = vec![slab];
        boxes.extend(self.boxes.iter().copied());
        Self { boxes }
    }

    /// Occupied cells with an exposed top or side face, in lattice order.
    pub fn surface(&self) -> Vec<([i32; 3], [u8; 3])> {
        let (lo, hi) = self.bounds();
        let mut out = Vec::new();
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let Some(color) = self.color_at([x, y, z]) else {
                        continue;
                    };
                    let exposed = [[0, 0, 1], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
                        .iter()
                        .any(|d| self.color_at([x + d[0], y + d[1], z + d[2]]).is_none());
                    if exposed {
                        out.push(([x, y, z], color));
                    }
                }
            }
        }
        out
    }

    /// Surface splats in world space for the tile at `tile`.
    pub fn world_splats(&self, tile: TileCoord) -> SplatSet {
        let h = 1.0 / CELLS_PER_TILE as f64;
        let gaussians = self
            .surface()
            .into_iter()
            .map(|(c, color)| {
                let p = [
                    tile.x as f64 + (c[0] as f64 + 0.5) * h,
                    tile.y as f64 + (c[1] as f64 + 0.5) * h,
                    (c[2] as f64 + 0.5) * h,
                ];
                Gaussian::isotropic(p.map(|v| v as f32), (0.5 * h) as f32, color)
            })
            .collect();
        SplatSet::new(gaussians)
    }
}

/// Similarity map from tile-local lattice units to the generator frame
/// `[−0.5, 0.5]`: `g = (c − center) / extent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorFrame {
    pub center: [f64; 3],
    pub extent: f64,
}

impl GeneratorFrame {
    pub fn fit(scene: &MockScene) -> Self {
        let (lo, hi) = scene.bounds();
        let center = [0, 1, 2].map(|k| (lo[k] + hi[k]) as f64 / 2.0);
        let extent = ((hi[0] - lo[0]).max(hi[1] - lo[1])) as f64;
        Self { center, extent }
    }

    pub fn to_generator(&self, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (c[k] - self.center[k]) / self.extent)
    }

    pub fn to_lattice(&self, g: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| g[k] * self.extent + self.center[k])
    }
}

fn features(color: [u8; 3], channels: usize) -> Vec<f32> {
    let mut f = vec![0.0; channels];
    for (k, v) in f.iter_mut().enumerate().take(4) {
        *v = if k < 3 { color[k] as f32 / 255.0 } else { 1.0 };
    }
    f
}

/// 3D sample of a slab-mounted scene in the generator frame, before faults.
pub fn sample_scene(scene: &MockScene, resolution: usize) -> (Image3DResult, GeneratorFrame) {
    let frame = GeneratorFrame::fit(scene);
    let sigma = 0.5 / frame.extent;
    let gaussians = scene
        .surface()
        .into_iter()
        .map(|(c, color)| {
            let g = frame.to_generator(c.map(|v| v as f64 + 0.5));
            Gaussian::isotropic(g.map(|v| v as f32), sigma as f32, color)
        })
        .collect();
    let r = resolution;
    let mut occupancy = OccupancyVolume::new(r);
    let mut latents = SparseLatentVolume::cubic(r, MOCK_CHANNELS);
    for w in 0..r {
        for v in 0..r {
            for u in 0..r {
                let g = [u, v, w].map(|i| -0.5 + (i as f64 + 0.5) / r as f64);
                let c = frame.to_lattice(g).map(|x| x.floor() as i32);
                if let Some(color) = scene.color_at(c) {
                    occupancy.set(u, v, w, true);
                    latents
                        .insert(
                            [u as u16, v as u16, w as u16],
                            features(color, MOCK_CHANNELS),
                        )
                        .expect("in range");
                }
            }
        }
    }
    (
        Image3DResult {
            splats: SplatSet::new(gaussians),
            occupancy,
            latents,
            seed: 0,
        },
        frame,
    )
}

fn remove_cells(result: &mut Image3DResult, cells: &[[usize; 3]]) {
    for c in cells {
        result.occupancy.set(c[0], c[1], c[2], false);
    }
    let occ = &result.occupancy;
    let mut kept = SparseLatentVolume::new(result.latents.dims(), result.latents.channels())
        .with_frame(result.latents.frame);
    for (c, f) in result.latents.iter() {
        if occ.get(c[0] as usize, c[1] as usize, c[2] as usize) {
            kept.insert(*c, f.clone()).expect("same dims");
        }
    }
    result.latents = kept;
}

/// Layers whose occupied area equals the largest layer area.
fn widest_layers(occ: &OccupancyVolume) -> Vec<usize> {
    let mut area = vec![0usize; occ.dims()[2]];
    for c in occ.active() {
        area[c[2]] += 1;
    }
    let max = area.iter().copied().max().unwrap_or(0);
    (0..area.len())
        .filter(|w| area[*w] == max && max > 0)
        .collect()
}

/// The procedural world model behind every mock role.
#[derive(Debug, Clone, Default)]
pub struct MockWorldModel {
    pub config: MockConfig,
    pub resolution: usize,
}

impl MockWorldModel {
    pub fn new(config: MockConfig) -> Self {
        Self {
            config,
            resolution: MOCK_RESOLUTION,
        }
    }

    fn fault(&self, tile: TileCoord, attempt: u32) -> Option<FaultKind> {
        self.config
            .faults
            .iter()
            .find(|f| f.tile == tile && attempt < f.attempts)
            .map(|f| f.kind)
    }

    /// Generates the sample for `tile` including any configured fault.
    pub fn sample(
        &self,
        prompt: &str,
        tile: TileCoord,
        scene_seed: u64,
        seed: u64,
        attempt: u32,
    ) -> Image3DResult {
        let scene = MockScene::generate(prompt, tile, scene_seed);
        let fault = self.fault(tile, attempt);
        let slab = scene.on_slab(fault != Some(FaultKind::MarginOverflow));
        let (mut result, _) = sample_scene(&slab, self.resolution);
        result.seed = seed;
        let r = self.resolution;
        match fault {
            Some(FaultKind::BrokenBorder) => {
                let mut cells = Vec::new();
                for w in widest_layers(&result.occupancy) {
                    cells.extend((1..r - 1).map(|u| [u, 0, w]));
                    cells.push([0, 1, w]);
                }
                remove_cells(&mut result, &cells);
            }
            Some(FaultKind::OffSquare) => {
                let cut = r * 54 / 64;
                let cells: Vec<[usize; 3]> =
                    result.occupancy.active().filter(|c| c[1] >= cut).collect();
                remove_cells(&mut result, &cells);
            }
            _ => {}
        }
        let k = match fault {
            Some(FaultKind::Rotation { k }) => k % 4,
            _ if self.config.random_rotation => (crate::seed::splitmix64(seed) % 4) as u8,
            _ => 0,
        };
        if k != 0 {
            result.splats = result.splats.rotated_quarter(k, [0.0, 0.0]);
            result.occupancy = result.occupancy.rotated_quarter(k);
            let dims = result.latents.dims();
            result.latents = result
                .latents
                .rotate_indices(k)
                .expect("cubic volume")
                .with_frame(VoxelFrame::unit_cube(dims));
        }
        result
    }
}

const FEATURES: [&str; 16] = [
    "cobbled square with a fountain",
    "quiet pond under willows",
    "row of market stalls",
    "stone bridge over a brook",
    "apple orchard",
    "wooden watchtower",
    "meadow of wildflowers",
    "old windmill",
    "harbor pier with crates",
    "lantern-lit alley",
    "small chapel",
    "blacksmith's forge",
    "vegetable garden",
    "ruined wall",
    "village well",
    "hay barn",
];

impl PromptExpander for MockWorldModel {
    fn expand(&self, seed_prompt: &str, width: u32, height: u32) -> Result<WorldSpec, GenError> {
        if width == 0 || height == 0 {
            return Err(GenError::Param(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        let mut tiles = Vec::new();
        for y in 0..height as i32 {
            for x in 0..width as i32 {
                let mut rng = scene_rng(seed_prompt, TileCoord::new(x, y), 0);
                let feature = FEATURES[rng.random_range(0..FEATURES.len())];
                tiles.push(TilePrompt {
                    prompt: feature.to_string(),
                    x,
                    y,
                });
            }
        }
        let global = format!(
            "{TILE_PROMPT_PLACEHOLDER}, {}, isometric view, soft shading",
            seed_prompt.trim()
        );
        WorldSpec::new(tiles, global).map_err(|e| GenError::Expansion {
            message: e.to_string(),
            raw: String::new(),
        })
    }
}

/// Straight-alpha composite of `top` over an opaque `bottom`.
fn over_opaque(top: Rgba<u8>, bottom: [u8; 3]) -> Rgba<u8> {
    raster::over(top, Rgba([bottom[0], bottom[1], bottom[2], 255]))
}

/// Fills each mask row with a linear blend of the pixels just outside it.
fn cross_fade(req: &InpaintRequest) -> RgbaImage {
    let base = &req.base.pixels;
    let mut out = base.clone();
    let w = base.width() as i64;
    for y in 0..base.height() {
        let mut x = 0i64;
        while x < w {
            if !req.mask.get(x as u32, y) {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && req.mask.get(x as u32, y) {
                x += 1;
            }
            let left = *base.get_pixel((start - 1).max(0) as u32, y);
            let right = *base.get_pixel(x.min(w - 1) as u32, y);
            let n = (x - start + 1) as f64;
            for i in start..x {
                let t = (i - start + 1) as f64 / n;
                let p = Rgba(
                    [0, 1, 2, 3]
                        .map(|k| ((1.0 - t) * left[k] as f64 + t * right[k] as f64).round() as u8),
                );
                out.put_pixel(i as u32, y, p);
            }
        }
    }
    out
}

impl Inpainter for MockWorldModel {
    fn inpaint(&self, req: &InpaintRequest) -> Result<FramedImage, GenError> {
        req.check().map_err(GenError::Param)?;
        if req.base.kind == FrameKind::SeamView {
            let mut out = req.base.clone();
            out.pixels = cross_fade(req);
            out.kind = FrameKind::InpaintResult;
            return Ok(out);
        }
        let prov = req
            .base
            .provenance
            .as_ref()
            .ok_or_else(|| GenError::Param("mock inpainting needs provenance".into()))?;
        let scene = MockScene::generate(&prov.prompt, prov.tile, prov.seed).world_splats(prov.tile);
        let render = isorender::render_splats(&scene, &req.base.camera)
            .map_err(|e| GenError::Param(e.to_string()))?;
        let (w, h) = req.base.pixels.dimensions();
        let mut pixels = req.base.pixels.clone();
        let mut matte = GrayImage::new(w, h);
        for (x, y, p) in pixels.enumerate_pixels_mut() {
            if !req.mask.get(x, y) {
                continue;
            }
            let s = *render.pixels.get_pixel(x, y);
            *p = if p[3] == 0 {
                over_opaque(s, SKY)
            } else {
                raster::over(s, *p)
            };
            matte.put_pixel(x, y, Luma([s[3]]));
        }
        let mut out = req.base.clone();
        out.pixels = pixels;
        out.kind = FrameKind::InpaintResult;
        out.matte = Some(matte);
        Ok(out)
    }
}

impl ImageTo3d for MockWorldModel {
    fn image_to_3d(
        &self,
        prompt: &TileImagePrompt,
        seed: u64,
        attempt: u32,
    ) -> Result<Image3DResult, GenError> {
        if prompt.image.width() == 0 || prompt.image.height() == 0 {
            return Err(GenError::Param("empty image prompt".into()));
        }
        let prov = prompt
            .provenance
            .as_ref()
            .ok_or_else(|| GenError::Param("mock 3D generation needs provenance".into()))?;
        Ok(self.sample(&prov.prompt, prov.tile, prov.seed, seed, attempt))
    }
}

/// Per-cell colors seen by `view`: the pixel at the projected cell center,
/// for cells with a face toward the camera that pass a depth test. Faces on
/// the side walls of the volume do not count as exposed.
pub fn observed_colors(view: &FramedImage, latents: &SparseLatentVolume) -> Vec<Option<[f32; 3]>> {
    let cam = &view.camera;
    let (_, _, fwd) = cam.basis();
    let frame = &latents.frame;
    let cell = frame.cell_size().iter().cloned().fold(0.0, f64::max);
    let size = cam.size as i64;
    let radius = (0.5 * cell / cam.scale).max(0.5);
    let projected: Vec<_> = latents
        .keys()
        .map(|c| cam.project(frame.cell_center(*c)))
        .collect();
    let mut zbuf = vec![f64::INFINITY; (size * size) as usize];
    for p in &projected {
        let x0 = (p.px - radius - 0.5).ceil().max(0.0) as i64;
        let x1 = ((p.px + radius - 0.5).floor() as i64).min(size - 1);
        let y0 = (p.py - radius - 0.5).ceil().max(0.0) as i64;
        let y1 = ((p.py + radius - 0.5).floor() as i64).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let z = &mut zbuf[(y * size + x) as usize];
                *z = z.min(p.depth);
            }
        }
    }
    let dims = latents.dims();
    let faces: Vec<([i64; 3], bool)> = (0..6)
        .map(|i| {
            let (k, s) = (i / 2, if i % 2 == 0 { 1.0 } else { -1.0 });
            let a = frame.axes[k];
            let toward = -(a[0] * fwd[0] + a[1] * fwd[1] + a[2] * fwd[2]) * s > 1e-9;
            let mut d = [0i64; 3];
            d[k] = s as i64;
            (d, toward)
        })
        .collect();
    latents
        .keys()
        .zip(&projected)
        .map(|(c, p)| {
            let exposed = faces.iter().any(|(d, toward)| {
                *toward && {
                    let n = [0, 1, 2].map(|k| c[k] as i64 + d[k]);
                    if (0..3).any(|k| n[k] < 0 || n[k] >= dims[k] as i64) {
                        return d[2] == 1;
                    }
                    !latents.contains(n.map(|v| v as u16))
                }
            });
            let (x, y) = (p.px.floor() as i64, p.py.floor() as i64);
            if !exposed || x < 0 || y < 0 || x >= size || y >= size {
                return None;
            }
            if p.depth > zbuf[(y * size + x) as usize] + 1.5 * cell {
                return None;
            }
            let px = view.pixels.get_pixel(x as u32, y as u32);
            (px[3] > 0).then(|| [px[0], px[1], px[2]].map(|v| v as f32 / 255.0))
        })
        .collect()
}

impl LatentDenoiser for MockWorldModel {
    /// Pulls every observed cell linearly toward the mean observed color so
    /// that the final step lands on it exactly; unobserved cells follow the
    /// reference when one is given and otherwise keep their value.
    fn denoise_step(&self, req: &DenoiseRequest) -> Result<DenoiseStep, GenError> {
        if req.views.is_empty() {
            return Err(GenError::Param(
                "at least one conditioning view is required".into(),
            ));
        }
        let sched = &req.schedule;
        if req.step >= sched.steps {
            return Err(GenError::Param(format!(
                "step {} outside schedule of {} steps",
                req.step, sched.steps
            )));
        }
        if let Some(r) = &req.reference {
            if r.dims() != req.latents.dims() || r.channels() != req.latents.channels() {
                return Err(GenError::Shape(
                    "reference does not match the latents".into(),
                ));
            }
        }
        let x = &req.latents;
        let d = x.channels();
        let n = x.len();
        let mut sum = vec![[0f32; 3]; n];
        let mut count = vec![0u32; n];
        for view in &req.views {
            for (i, c) in observed_colors(view, x).into_iter().enumerate() {
                if let Some(c) = c {
                    for k in 0..3 {
                        sum[i][k] += c[k];
                    }
                    count[i] += 1;
                }
            }
        }
        let (s0, s1) = (sched.sigma(req.step), sched.sigma(req.step + 1));
        let a = if s1 == 0.0 { 0.0 } else { (s1 / s0) as f32 };
        let mut weights = vec![0f32; n];
        let mut i = 0;
        let latents = x.map_features(|cell, v| {
            let target: Option<Vec<f32>> = if count[i] > 0 {
                let mean = sum[i].map(|s| s / count[i] as f32);
                let mut f = features([0, 0, 0], d);
                for k in 0..3.min(d) {
                    f[k] = mean[k];
                }
                Some(f)
            } else {
                req.reference
                    .as_ref()
                    .and_then(|r| r.get(*cell))
                    .map(|f| f.to_vec())
            };
            let out = match target {
                Some(t) => {
                    weights[i] = 1.0;
                    if a == 0.0 {
                        t
                    } else {
                        v.iter()
                            .zip(&t)
                            .map(|(x, t)| a * x + (1.0 - a) * t)
                            .collect()
                    }
                }
                None => v.to_vec(),
            };
            i += 1;
            out
        });
        if !latents.all_finite() {
            return Err(GenError::Shape("non-finite output".into()));
        }
        Ok(DenoiseStep {
            latents,
            weights: Some(weights),
        })
    }

    /// One isotropic splat per cell with an exposed top or side face. Faces
    /// on the sides of the volume do not count.
    fn decode(&self, latents: &SparseLatentVolume) -> Result<SplatSet, GenError> {
        if latents.channels() < 4 {
            return Err(GenError::Shape(format!(
                "decoder needs 4 channels, got {}",
                latents.channels()
            )));
        }
        let dims = latents.dims();
        let size = latents.frame.cell_size();
        let sigma = 0.5 * (size[0] + size[1] + size[2]) / 3.0;
        let mut gaussians = Vec::new();
        for (c, f) in latents.iter() {
            let exposed = [[0i64, 0, 1], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
                .iter()
                .any(|d| {
                    let n = [0, 1, 2].map(|k| c[k] as i64 + d[k]);
                    // The volume's side walls are cut planes, not surfaces.
                    if (0..3).any(|k| n[k] < 0 || n[k] >= dims[k] as i64) {
                        return d[2] == 1;
                    }
                    !latents.contains(n.map(|v| v as u16))
                });
            if !exposed || f[3] < 0.05 || f.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let color = [0, 1, 2].map(|k| (f[k].clamp(0.0, 1.0) * 255.0).round() as u8);
            let center = latents.frame.cell_center(*c).map(|v| v as f32);
            let mut g = Gaussian::isotropic(center, sigma as f32, color);
            g.opacity = f[3].clamp(0.0, 1.0);
            gaussians.push(g);
        }
        Ok(SplatSet::new(gaussians))
    }
}
