//! Checkpoint directories and world export.
//!
//! Checkpoint layout:
//!
//! ```text
//! <dir>/manifest.json            spec, config, cursor, blend log, tile list
//! <dir>/tiles/<x>_<y>/tile.json  prompt, attempts, transform, latent frame
//! <dir>/tiles/<x>_<y>/sample.ply       generator splats
//! <dir>/tiles/<x>_<y>/occupancy.occv   first-stage occupancy
//! <dir>/tiles/<x>_<y>/latents.slat     second-stage latents
//! <dir>/tiles/<x>_<y>/world.ply        current world-space splats
//! ```
//!
//! Export layout: `world.ply`, `manifest.json` (no timings) and
//! `report.json`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    assemble, AttemptRecord, BlendRecord, BuildReport, Metrics, PipelineConfig, PipelineError,
    PlacedTile, WorldGrid,
};
use crate::genproto::Image3DResult;
use crate::latentops::{self, VoxelFrame};
use crate::occupancy;
use crate::splat::{self, SplatSet};
use crate::splatpost::TileTransform;
use crate::worldspec::{parse_world_spec, TileCoord, WorldSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    spec: String,
    config: PipelineConfig,
    cursor: usize,
    tiles: Vec<TileCoord>,
    blend_log: Vec<BlendRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TileFile {
    coord: TileCoord,
    prompt: String,
    seed: u64,
    attempts: Vec<AttemptRecord>,
    transform: TileTransform,
    reorient_scores: [f64; 4],
    ground_level: f64,
    latent_frame: VoxelFrame,
}

fn ck(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Checkpoint(e.to_string())
}

fn tile_dir(dir: &Path, c: TileCoord) -> PathBuf {
    dir.join("tiles").join(format!("{}_{}", c.x, c.y))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(ck)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn write_ply_file(path: &Path, splats: &SplatSet) -> Result<(), PipelineError> {
    Ok(write_atomic(path, &splat::encode_ply(splats))?)
}

pub(crate) fn has_checkpoint(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

/// Writes every placed tile not yet on disk, refreshes the world splats of
/// all tiles, then replaces the manifest.
pub fn save_checkpoint(
    grid: &WorldGrid,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir.join("tiles"))?;
    for (c, t) in &grid.tiles {
        let td = tile_dir(dir, *c);
        if !td.join("tile.json").is_file() {
            fs::create_dir_all(&td)?;
            write_ply_file(&td.join("sample.ply"), &t.sample.splats)?;
            write_atomic(
                &td.join("occupancy.occv"),
                &occupancy::encode_occv(&t.sample.occupancy).map_err(ck)?,
            )?;
            write_atomic(
                &td.join("latents.slat"),
                &latentops::encode_slat(&t.sample.latents).map_err(ck)?,
            )?;
            let file = TileFile {
                coord: *c,
                prompt: t.prompt.clone(),
                seed: t.sample.seed,
                attempts: t.attempts.clone(),
                transform: t.transform,
                reorient_scores: t.reorient_scores,
                ground_level: t.ground_level,
                latent_frame: t.sample.latents.frame,
            };
            write_json(&td.join("tile.json"), &file)?;
        }
        write_ply_file(&td.join("world.ply"), &t.splats)?;
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        spec: grid.spec.to_json(),
        config: config.clone(),
        cursor: grid.cursor,
        tiles: grid.tiles.keys().copied().collect(),
        blend_log: grid.blend_log.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn open(path: &Path) -> Result<BufReader<fs::File>, PipelineError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| ck(format!("{}: {e}", path.display())))
}

fn load_tile(dir: &Path, c: TileCoord) -> Result<PlacedTile, PipelineError> {
    let td = tile_dir(dir, c);
    let file: TileFile = serde_json::from_reader(open(&td.join("tile.json"))?).map_err(ck)?;
    if file.coord != c {
        return Err(ck(format!("{} holds tile {}", td.display(), file.coord)));
    }
    let splats = splat::read_ply(open(&td.join("sample.ply"))?).map_err(ck)?;
    let occupancy = occupancy::read_occv(open(&td.join("occupancy.occv"))?).map_err(ck)?;
    let latents = latentops::read_slat(open(&td.join("latents.slat"))?)
        .map_err(ck)?
        .with_frame(file.latent_frame);
    let world = splat::read_ply(open(&td.join("world.ply"))?).map_err(ck)?;
    Ok(PlacedTile {
        coord: c,
        prompt: file.prompt,
        attempts: file.attempts,
        sample: Image3DResult {
            splats,
            occupancy,
            latents,
            seed: file.seed,
        },
        transform: file.transform,
        reorient_scores: file.reorient_scores,
        ground_level: file.ground_level,
        splats: world,
    })
}

/// Restores a grid saved by [`save_checkpoint`]. The stored spec and
/// configuration must equal the given ones.
pub fn load_checkpoint(
    dir: &Path,
    spec: &WorldSpec,
    config: &PipelineConfig,
) -> Result<WorldGrid, PipelineError> {
    let manifest: CheckpointManifest =
        serde_json::from_reader(open(&dir.join("manifest.json"))?).map_err(ck)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ck(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let stored = parse_world_spec(manifest.spec.as_bytes()).map_err(ck)?;
    if &stored != spec {
        return Err(ck("checkpoint was written for a different world spec"));
    }
    if &manifest.config != config {
        return Err(ck("checkpoint was written with a different configuration"));
    }
    let order = crate::worldspec::build_order(spec.width(), spec.height());
    if manifest.cursor > order.len()
        || manifest.tiles.as_slice() != &order.as_slice()[..manifest.cursor]
    {
        return Err(ck("checkpoint tiles are not a prefix of the build order"));
    }
    let mut grid = WorldGrid::new(stored);
    for c in &manifest.tiles {
        grid.tiles.insert(*c, load_tile(dir, *c)?);
    }
    grid.cursor = manifest.cursor;
    grid.blend_log = manifest.blend_log;
    Ok(grid)
}

#[derive(Debug, Serialize)]
struct ExportTile<'a> {
    x: i32,
    y: i32,
    prompt: &'a str,
    tile_seed: u64,
    accepted_seed: u64,
    attempts: usize,
    transform: &'a TileTransform,
    ground_level: f64,
    splats: usize,
}

#[derive(Debug, Serialize)]
struct ExportManifest<'a> {
    width: u32,
    height: u32,
    global_prompt: &'a str,
    world_splats: usize,
    tiles: Vec<ExportTile<'a>>,
    blends: &'a [BlendRecord],
    metrics: &'a Option<Metrics>,
    ground_spread: f64,
    config: &'a PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub world_ply: PathBuf,
    pub manifest: PathBuf,
    pub report: PathBuf,
    /// SHA-256 of `world.ply` and `manifest.json`, hex.
    pub ply_sha256: String,
    pub manifest_sha256: String,
}

/// Writes the assembled world, its manifest and the build report into `dir`.
pub fn export_world(
    grid: &WorldGrid,
    report: &BuildReport,
    dir: &Path,
) -> Result<ExportSummary, PipelineError> {
    fs::create_dir_all(dir)?;
    let world = assemble(grid, report.config.framing.slab.thickness);
    let ply = splat::encode_ply(&world);
    let tiles = report
        .tiles
        .iter()
        .map(|t| ExportTile {
            x: t.x,
            y: t.y,
            prompt: &t.prompt,
            tile_seed: t.tile_seed,
            accepted_seed: t.accepted_seed,
            attempts: t.attempts.len(),
            transform: &t.transform,
            ground_level: t.ground_level,
            splats: t.splats,
        })
        .collect();
    let manifest = ExportManifest {
        width: report.width,
        height: report.height,
        global_prompt: grid.spec.global_prompt(),
        world_splats: world.len(),
        tiles,
        blends: &report.blends,
        metrics: &report.metrics,
        ground_spread: report.ground_spread,
        config: &report.config,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(ck)?;
    manifest_bytes.push(b'\n');

    let summary = ExportSummary {
        world_ply: dir.join("world.ply"),
        manifest: dir.join("manifest.json"),
        report: dir.join("report.json"),
        ply_sha256: hex::encode(Sha256::digest(&ply)),
        manifest_sha256: hex::encode(Sha256::digest(&manifest_bytes)),
    };
    write_atomic(&summary.world_ply, &ply)?;
    write_atomic(&summary.manifest, &manifest_bytes)?;
    let mut out = BufWriter::new(fs::File::create(&summary.report)?);
    serde_json::to_writer_pretty(&mut out, report).map_err(ck)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(summary)
}
