//! Tile-by-tile world build: generation with retries, post-processing,
//! placement, seam blending, assembly and export.

mod blend;
mod store;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing2d::{self, FramingError, FramingParams, DEFAULT_REBASE_MARGIN};
use crate::genproto::{Endpoints, GenError, Image3DResult};
use crate::isorender::SlabParams;
use crate::latentops::{
    LatentError, SeamOrientation, UpsampleMode, DEFAULT_BAND_HALF_WIDTH, DEFAULT_STEPS,
};
use crate::occupancy::{validate_tile, ValidationReport, ValidationThresholds};
use crate::seed;
use crate::splat::SplatSet;
use crate::splatpost::{
    self, CutParams, ReorientTarget, SplatPostError, TileTransform, DEFAULT_CORNER_PATCH,
};
use crate::worldspec::{build_order, compose_prompt, TileCoord, WorldSpec};

pub use blend::{blend_pair, seam_region, BlendRecord, BlendStatus};
pub use store::{
    export_world, load_checkpoint, save_checkpoint, ExportSummary, CHECKPOINT_VERSION,
};

pub const DEFAULT_RETRY_BUDGET: u32 = 8;
pub const DEFAULT_LATENT_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    /// Blend each new tile with its west, then north neighbor.
    #[default]
    PerTile,
    /// Blend every seam after all tiles are placed, in the same order.
    Deferred,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// Attempts allowed per tile, counting the first.
    pub retry_budget: u32,
    pub thresholds: ValidationThresholds,
    pub cuts: CutParams,
    pub framing: FramingParams,
    pub rebase_margin: f64,
    pub corner_patch: f64,
    /// Latent resolution R used for upsampling and stitching.
    pub latent_resolution: usize,
    pub band_half_width: usize,
    pub denoise_steps: usize,
    pub upsample_mode: UpsampleMode,
    /// Side of each conditioning render for latent upsampling.
    pub view_size: u32,
    pub view_fraction: f64,
    /// Side of the seam view.
    pub seam_view_size: u32,
    pub blend: BlendMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            retry_budget: DEFAULT_RETRY_BUDGET,
            thresholds: ValidationThresholds::default(),
            cuts: CutParams::default(),
            framing: FramingParams::default(),
            rebase_margin: DEFAULT_REBASE_MARGIN,
            corner_patch: DEFAULT_CORNER_PATCH,
            latent_resolution: DEFAULT_LATENT_RESOLUTION,
            band_half_width: DEFAULT_BAND_HALF_WIDTH,
            denoise_steps: DEFAULT_STEPS,
            upsample_mode: UpsampleMode::Nearest,
            view_size: 256,
            view_fraction: 0.6,
            seam_view_size: 256,
            blend: BlendMode::PerTile,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let t = self.thresholds;
        if !(t.alpha > 0.0 && t.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", t.alpha));
        }
        if !(t.beta > 0.0 && t.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", t.beta));
        }
        if self.retry_budget == 0 {
            return bad("retry budget must be at least 1".into());
        }
        let r = self.latent_resolution;
        if r < 4 || r % 2 != 0 || r > u16::MAX as usize {
            return bad(format!(
                "latent resolution must be even and at least 4, got {r}"
            ));
        }
        if 2 * self.band_half_width >= r {
            return bad(format!(
                "band half-width {} must be below R/2 = {}",
                self.band_half_width,
                r / 2
            ));
        }
        if !(self.cuts.tau > 0.0) || !(self.cuts.delta > 0.0 && self.cuts.delta < 0.5) {
            return bad(format!(
                "cut parameters out of range: tau {}, delta {}",
                self.cuts.tau, self.cuts.delta
            ));
        }
        if !(self.rebase_margin >= 0.0 && self.rebase_margin < 1.0) {
            return bad(format!(
                "rebase margin must lie in [0, 1), got {}",
                self.rebase_margin
            ));
        }
        if !(self.corner_patch > 0.0 && self.corner_patch <= 0.5) {
            return bad(format!(
                "corner patch must lie in (0, 0.5], got {}",
                self.corner_patch
            ));
        }
        if self.denoise_steps == 0 {
            return bad("at least one denoising step is required".into());
        }
        if self.view_size == 0 || self.seam_view_size == 0 || !(self.view_fraction > 0.0) {
            return bad("view sizes must be positive".into());
        }
        self.framing
            .camera
            .check()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn rebase_slab(&self) -> SlabParams {
        SlabParams {
            margin: self.rebase_margin,
            ..self.framing.slab
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttemptOutcome {
    Accepted,
    Rejected,
    /// Validation passed but a cut fell back to the fixed margin.
    CutFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub seed: u64,
    pub outcome: AttemptOutcome,
    pub report: ValidationReport,
}

/// A generated tile in its grid slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedTile {
    pub coord: TileCoord,
    pub prompt: String,
    pub attempts: Vec<AttemptRecord>,
    pub sample: Image3DResult,
    pub transform: TileTransform,
    pub reorient_scores: [f64; 4],
    /// Ground height of the placed tile relative to the world ground plane,
    /// measured right after placement.
    pub ground_level: f64,
    /// Current world-space splats, including blended seams.
    pub splats: SplatSet,
}

impl PlacedTile {
    pub fn seed(&self) -> u64 {
        self.sample.seed
    }

    pub fn report(&self) -> &ValidationReport {
        &self
            .attempts
            .last()
            .expect("placed tiles have an accepted attempt")
            .report
    }

    /// World-space splats as placed, before any blending.
    pub fn placed_splats(&self) -> SplatSet {
        self.transform.apply(&self.sample.splats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldGrid {
    pub spec: WorldSpec,
    pub tiles: BTreeMap<TileCoord, PlacedTile>,
    /// Number of tiles placed, as an index into the build order.
    pub cursor: usize,
    pub blend_log: Vec<BlendRecord>,
}

impl WorldGrid {
    pub fn new(spec: WorldSpec) -> Self {
        Self {
            spec,
            tiles: BTreeMap::new(),
            cursor: 0,
            blend_log: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cursor == self.spec.tiles().len()
    }

    fn placed_splats(&self) -> BTreeMap<TileCoord, SplatSet> {
        self.tiles
            .iter()
            .map(|(c, t)| (*c, t.splats.clone()))
            .collect()
    }

    fn has_blend(&self, a: TileCoord, b: TileCoord) -> bool {
        self.blend_log.iter().any(|r| r.a == a && r.b == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tiles: usize,
    pub mean_base_area: f64,
    pub mean_squareness: f64,
    pub mean_completeness: f64,
}

/// Means of base area, squareness and completeness; `None` without reports.
pub fn compute_metrics(reports: &[ValidationReport]) -> Option<Metrics> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(Metrics {
        tiles: reports.len(),
        mean_base_area: reports.iter().map(|r| r.base_area as f64).sum::<f64>() / n,
        mean_squareness: reports.iter().map(|r| r.squareness).sum::<f64>() / n,
        mean_completeness: reports.iter().map(|r| r.completeness).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub x: i32,
    pub y: i32,
    pub prompt: String,
    pub tile_seed: u64,
    pub accepted_seed: u64,
    pub attempts: Vec<AttemptRecord>,
    pub transform: TileTransform,
    pub reorient_scores: [f64; 4],
    pub ground_level: f64,
    pub splats: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: u64,
    /// Tiles generated during this run, keyed `"x,y"`.
    pub tiles_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub width: u32,
    pub height: u32,
    pub complete: bool,
    pub tiles: Vec<TileSummary>,
    pub blends: Vec<BlendRecord>,
    pub metrics: Option<Metrics>,
    /// Largest difference between tile ground levels.
    pub ground_spread: f64,
    pub config: PipelineConfig,
    pub timings: Timings,
}

impl BuildReport {
    pub fn from_grid(grid: &WorldGrid, config: &PipelineConfig, timings: Timings) -> Self {
        let tiles: Vec<TileSummary> = grid
            .tiles
            .values()
            .map(|t| TileSummary {
                x: t.coord.x,
                y: t.coord.y,
                prompt: t.prompt.clone(),
                tile_seed: seed::tile_seed(config.master_seed, t.coord),
                accepted_seed: t.seed(),
                attempts: t.attempts.clone(),
                transform: t.transform,
                reorient_scores: t.reorient_scores,
                ground_level: t.ground_level,
                splats: t.splats.len(),
            })
            .collect();
        let reports: Vec<ValidationReport> =
            grid.tiles.values().map(|t| t.report().clone()).collect();
        let levels = grid.tiles.values().map(|t| t.ground_level);
        let (lo, hi) = levels.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
            (lo.min(g), hi.max(g))
        });
        Self {
            width: grid.spec.width(),
            height: grid.spec.height(),
            complete: grid.is_complete(),
            tiles,
            blends: grid.blend_log.clone(),
            metrics: compute_metrics(&reports),
            ground_spread: if grid.tiles.is_empty() { 0.0 } else { hi - lo },
            config: config.clone(),
            timings,
        }
    }

    pub fn retries(&self) -> usize {
        self.tiles.iter().map(|t| t.attempts.len() - 1).sum()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tile {tile}: {source}")]
    Framing {
        tile: TileCoord,
        source: FramingError,
    },
    #[error("tile {tile}: {source}")]
    Generator { tile: TileCoord, source: GenError },
    #[error("tile {tile}: {source}")]
    Post {
        tile: TileCoord,
        source: SplatPostError,
    },
    #[error("tile {tile}: no acceptable sample within {} attempts", attempts.len())]
    RetryExhausted {
        tile: TileCoord,
        attempts: Vec<AttemptRecord>,
    },
    #[error("tiles {a} and {b} are not placed 4-neighbors")]
    NotAdjacent { a: TileCoord, b: TileCoord },
    #[error("blend {a}-{b}: {source}")]
    Blend {
        a: TileCoord,
        b: TileCoord,
        source: LatentError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Tile the failure belongs to, if any.
    pub fn tile(&self) -> Option<TileCoord> {
        match self {
            PipelineError::Framing { tile, .. }
            | PipelineError::Generator { tile, .. }
            | PipelineError::Post { tile, .. }
            | PipelineError::RetryExhausted { tile, .. } => Some(*tile),
            PipelineError::NotAdjacent { b, .. } | PipelineError::Blend { b, .. } => Some(*b),
            _ => None,
        }
    }
}

/// Run control that does not affect the result.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Checkpoint written after every placed tile.
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint when one exists.
    pub resume: bool,
    /// Stop once this many tiles are placed.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub grid: WorldGrid,
    pub report: BuildReport,
}

struct Session<'a> {
    endpoints: &'a Endpoints,
    config: &'a PipelineConfig,
    cache: blend::UpsampleCache,
}

impl Session<'_> {
    fn generate(&self, grid: &WorldGrid, coord: TileCoord) -> Result<PlacedTile, PipelineError> {
        let cfg = self.config;
        let ep = self.endpoints;
        let post = |source| PipelineError::Post {
            tile: coord,
            source,
        };
        let gen = |source| PipelineError::Generator {
            tile: coord,
            source,
        };
        let framing = |source| PipelineError::Framing {
            tile: coord,
            source,
        };
        let base_seed = seed::tile_seed(cfg.master_seed, coord);
        let placed = grid.placed_splats();
        let prompt = compose_prompt(&grid.spec, coord, cfg.framing.prompt_mode);
        let mut attempts = Vec::new();

        for attempt in 0..cfg.retry_budget {
            let s = seed::attempt_seed(base_seed, attempt);
            let req = framing2d::build_inpaint_request(&grid.spec, &placed, coord, s, &cfg.framing)
                .map_err(framing)?;
            let image = ep.inpainter.inpaint(&req).map_err(gen)?;
            let fg = framing2d::extract_foreground(&image, &req.mask, ep.background.as_ref())
                .map_err(framing)?;
            let image_prompt =
                framing2d::rebase(&fg, coord, &cfg.rebase_slab()).map_err(framing)?;
            let sample = ep
                .image_to_3d
                .image_to_3d(&image_prompt, s, attempt)
                .map_err(gen)?;
            sample.check().map_err(gen)?;

            let report = validate_tile(&sample.occupancy, cfg.thresholds);
            if !report.accepted() {
                log::info!(
                    "tile {coord} attempt {attempt} rejected: {:?}",
                    report.reject_reasons
                );
                attempts.push(AttemptRecord {
                    attempt,
                    seed: s,
                    outcome: AttemptOutcome::Rejected,
                    report,
                });
                continue;
            }
            let cuts = splatpost::detect_cuts(&sample.splats, &cfg.cuts).map_err(post)?;
            if cuts.any_fallback() {
                log::info!(
                    "tile {coord} attempt {attempt}: base boundary not found {:?}",
                    cuts.fallback
                );
                attempts.push(AttemptRecord {
                    attempt,
                    seed: s,
                    outcome: AttemptOutcome::CutFallback,
                    report,
                });
                continue;
            }
            attempts.push(AttemptRecord {
                attempt,
                seed: s,
                outcome: AttemptOutcome::Accepted,
                report,
            });

            let (local, transform) =
                splatpost::normalize_tile(&sample.splats, &cuts).map_err(post)?;
            let ground = splatpost::ground_height(&local, cfg.corner_patch).map_err(post)?;
            let transform = TileTransform {
                ground,
                ..transform
            };
            let local = transform.apply(&sample.splats);
            let target = ReorientTarget {
                image: fg.in_frame(),
                rect: fg.rect,
            };
            let (k, scores) = splatpost::reorient(
                &local,
                &target,
                &req.base.camera,
                coord,
                ep.distance.as_ref(),
            )
            .map_err(post)?;
            let transform = TileTransform {
                rotation: k,
                ..transform
            }
            .placed_at(coord);
            let splats = transform.apply(&sample.splats);
            let ground_level = splatpost::ground_height(
                &splats.translated([-coord.x as f64, -coord.y as f64, 0.0]),
                cfg.corner_patch,
            )
            .map_err(post)?;
            return Ok(PlacedTile {
                coord,
                prompt,
                attempts,
                sample,
                transform,
                reorient_scores: scores,
                ground_level,
                splats,
            });
        }
        Err(PipelineError::RetryExhausted {
            tile: coord,
            attempts,
        })
    }

    /// Blends `c` with its placed west and north neighbors, in that order.
    fn blend_neighbors(&mut self, grid: &mut WorldGrid, c: TileCoord) -> Result<(), PipelineError> {
        for n in [TileCoord::new(c.x - 1, c.y), TileCoord::new(c.x, c.y - 1)] {
            if grid.tiles.contains_key(&n) && !grid.has_blend(n, c) {
                let record = blend::blend_pair_cached(
                    grid,
                    n,
                    c,
                    self.endpoints,
                    self.config,
                    &mut self.cache,
                )?;
                grid.blend_log.push(record);
            }
        }
        Ok(())
    }
}

/// Builds (or continues building) the world described by `spec`.
pub fn build_world(
    spec: &WorldSpec,
    endpoints: &Endpoints,
    config: &PipelineConfig,
    options: &BuildOptions,
) -> Result<BuildOutcome, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let mut grid = match &options.checkpoint {
        Some(dir) if options.resume && store::has_checkpoint(dir) => {
            let grid = load_checkpoint(dir, spec, config)?;
            log::info!(
                "resuming after {} of {} tiles",
                grid.cursor,
                spec.tiles().len()
            );
            grid
        }
        _ => WorldGrid::new(spec.clone()),
    };
    let mut session = Session {
        endpoints,
        config,
        cache: blend::UpsampleCache::default(),
    };
    let mut timings = Timings::default();
    let order = build_order(spec.width(), spec.height());

    while grid.cursor < order.len() {
        if options.stop_after.is_some_and(|k| grid.cursor >= k) {
            break;
        }
        let coord = order.as_slice()[grid.cursor];
        let t0 = Instant::now();
        let tile = session.generate(&grid, coord)?;
        grid.tiles.insert(coord, tile);
        grid.cursor += 1;
        if config.blend == BlendMode::PerTile {
            session.blend_neighbors(&mut grid, coord)?;
        }
        timings.tiles_ms.insert(
            format!("{},{}", coord.x, coord.y),
            t0.elapsed().as_millis() as u64,
        );
        if let Some(dir) = &options.checkpoint {
            save_checkpoint(&grid, config, dir)?;
        }
    }

    if grid.is_complete() && config.blend == BlendMode::Deferred {
        for c in order.iter() {
            session.blend_neighbors(&mut grid, *c)?;
        }
        if let Some(dir) = &options.checkpoint {
            save_checkpoint(&grid, config, dir)?;
        }
    }
    timings.total_ms = started.elapsed().as_millis() as u64;
    let report = BuildReport::from_grid(&grid, config, timings);
    Ok(BuildOutcome { grid, report })
}

/// Union of all placed tiles in build order, without gaussians more than
/// one slab thickness below the ground plane.
pub fn assemble(grid: &WorldGrid, slab_thickness: f64) -> SplatSet {
    let mut out = SplatSet::default();
    for tile in grid.tiles.values() {
        out.extend(&tile.splats);
    }
    SplatSet::new(
        out.iter()
            .filter(|g| g.center[2] as f64 >= -slab_thickness)
            .copied()
            .collect(),
    )
}

/// Orientation of the seam between two 4-adjacent tiles, with the pair
/// ordered west-east or north-south.
pub fn seam_orientation(
    a: TileCoord,
    b: TileCoord,
) -> Option<(TileCoord, TileCoord, SeamOrientation)> {
    match (b.x - a.x, b.y - a.y) {
        (1, 0) => Some((a, b, SeamOrientation::EastWest)),
        (-1, 0) => Some((b, a, SeamOrientation::EastWest)),
        (0, 1) => Some((a, b, SeamOrientation::NorthSouth)),
        (0, -1) => Some((b, a, SeamOrientation::NorthSouth)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genproto::mock::{Fault, FaultKind, MockConfig};
    use crate::occupancy::Verdict;
    use crate::worldspec::TilePrompt;

    fn report(area: u64, sq: f64, comp: f64) -> ValidationReport {
        ValidationReport {
            ext_u: 0,
            ext_v: 0,
            base_area: area,
            squareness: sq,
            completeness: comp,
            verdict: Verdict::Accept,
            reject_reasons: vec![],
        }
    }

    pub(crate) fn spec(w: i32, h: i32) -> WorldSpec {
        let names = [
            "mill", "pond", "market", "orchard", "tower", "bridge", "chapel", "forge", "garden",
        ];
        let mut tiles = Vec::new();
        for y in 0..h {
            for x in 0..w {
                tiles.push(TilePrompt {
                    prompt: names[((y * w + x) as usize) % names.len()].into(),
                    x,
                    y,
                });
            }
        }
        WorldSpec::new(tiles, "{tile_prompt}, isometric").unwrap()
    }

    #[test]
    fn metrics_are_means() {
        let m = compute_metrics(&[report(4096, 1.0, 1.0), report(2048, 0.8, 0.5)]).unwrap();
        assert_eq!(m.mean_base_area, 3072.0);
        assert!((m.mean_squareness - 0.9).abs() < 1e-12);
        assert_eq!(m.mean_completeness, 0.75);
        let single = compute_metrics(&[report(100, 0.5, 0.25)]).unwrap();
        assert_eq!(
            (
                single.mean_base_area,
                single.mean_squareness,
                single.mean_completeness
            ),
            (100.0, 0.5, 0.25)
        );
        assert!(compute_metrics(&[]).is_none());
    }

    #[test]
    fn seam_orientation_orders_pairs() {
        let (a, b) = (TileCoord::new(1, 1), TileCoord::new(2, 1));
        assert_eq!(
            seam_orientation(b, a),
            Some((a, b, SeamOrientation::EastWest))
        );
        let c = TileCoord::new(1, 2);
        assert_eq!(
            seam_orientation(c, a),
            Some((a, c, SeamOrientation::NorthSouth))
        );
        assert_eq!(seam_orientation(a, TileCoord::new(2, 2)), None);
        assert_eq!(seam_orientation(a, a), None);
    }

    #[test]
    fn config_ranges_are_enforced() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut c = PipelineConfig::default();
        c.band_half_width = 32;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.thresholds.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.retry_budget = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_tile_build_has_no_blends() {
        let ep = Endpoints::mock(MockConfig::default());
        let out = build_world(
            &spec(1, 1),
            &ep,
            &PipelineConfig::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(out.grid.tiles.len(), 1);
        assert!(out.grid.blend_log.is_empty());
        assert_eq!(out.report.retries(), 0);
        let world = assemble(&out.grid, 0.08);
        assert_eq!(world, out.grid.tiles[&TileCoord::new(0, 0)].splats);
    }

    #[test]
    fn exhausted_budget_names_the_tile() {
        let faults = vec![Fault {
            tile: TileCoord::new(0, 0),
            kind: FaultKind::OffSquare,
            attempts: 10,
        }];
        let ep = Endpoints::mock(MockConfig {
            faults,
            ..MockConfig::default()
        });
        let cfg = PipelineConfig {
            retry_budget: 3,
            ..PipelineConfig::default()
        };
        match build_world(&spec(1, 1), &ep, &cfg, &BuildOptions::default()) {
            Err(e @ PipelineError::RetryExhausted { .. }) => {
                assert_eq!(e.tile(), Some(TileCoord::new(0, 0)));
                let PipelineError::RetryExhausted { attempts, .. } = e else {
                    unreachable!()
                };
                assert_eq!(attempts.len(), 3);
                assert!(attempts
                    .iter()
                    .all(|a| a.outcome == AttemptOutcome::Rejected));
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }
}
