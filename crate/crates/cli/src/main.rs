//! `tileworld` command-line driver.
//!
//! Effective settings are layered: command-line flags, then `TILEWORLD_*`
//! environment variables, then the `--config` TOML file, then built-in
//! defaults. Errors go to stderr as one JSON object per line; see
//! [`error::exit`] for the exit codes.

mod endpoints;
mod error;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tileworld::genproto::client::RemoteClient;
use tileworld::genproto::mock::MockConfig;
use tileworld::genproto::server::{self, ServerOptions};
use tileworld::genproto::{conformance, Endpoints, Role};
use tileworld::occupancy::{self, ValidationReport, ValidationThresholds};
use tileworld::pipeline::{self, BlendMode, BuildOptions, PipelineConfig};
use tileworld::worldspec;

use crate::error::{exit, CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(
    name = "tileworld",
    version,
    about = "Build tiled 3D worlds from a grid of prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate, place and blend every tile, then export the world.
    Build(BuildArgs),
    /// Run the tile validation tests on an occupancy file.
    Validate(ValidateArgs),
    /// Check a remote generator service against the protocol contract.
    Conformance(ConformanceArgs),
    /// Mean base area, squareness and completeness over occupancy files.
    Metrics(MetricsArgs),
    /// Expand a seed prompt into a world spec.
    Expand(ExpandArgs),
    /// Serve the procedural mocks over the wire protocol.
    ServeMock(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BlendArg {
    PerTile,
    Deferred,
    Off,
}

impl From<BlendArg> for BlendMode {
    fn from(b: BlendArg) -> Self {
        match b {
            BlendArg::PerTile => BlendMode::PerTile,
            BlendArg::Deferred => BlendMode::Deferred,
            BlendArg::Off => BlendMode::Off,
        }
    }
}

/// Overrides shared by commands that read pipeline settings.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML file with `endpoints`, `[pipeline]` and `[mock]` sections.
    #[arg(long, env = "TILEWORLD_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "TILEWORLD_SEED")]
    seed: Option<u64>,
    /// Samples per tile before the build fails.
    #[arg(long, env = "TILEWORLD_RETRIES")]
    retries: Option<u32>,
    /// Latent band half-width r.
    #[arg(long = "band-r", env = "TILEWORLD_BAND_R")]
    band_r: Option<usize>,
    /// Cut color threshold τ.
    #[arg(long, env = "TILEWORLD_TAU")]
    tau: Option<f64>,
    /// Cut slice half-width δ, relative to the tile width.
    #[arg(long, env = "TILEWORLD_DELTA")]
    delta: Option<f64>,
    /// Squareness threshold α.
    #[arg(long, env = "TILEWORLD_ALPHA")]
    alpha: Option<f64>,
    /// Completeness threshold β.
    #[arg(long, env = "TILEWORLD_BETA")]
    beta: Option<f64>,
    /// Seam blending schedule.
    #[arg(long, value_enum, env = "TILEWORLD_BLEND")]
    blend: Option<BlendArg>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// World spec JSON.
    #[arg(long, env = "TILEWORLD_SPEC")]
    spec: PathBuf,
    /// `mock`, one service URL, or `role=target` pairs.
    #[arg(long, env = "TILEWORLD_ENDPOINTS")]
    endpoints: Option<String>,
    /// Output directory.
    #[arg(long, env = "TILEWORLD_OUT")]
    out: PathBuf,
    /// Continue from the checkpoint in `<out>/checkpoint`.
    #[arg(long, env = "TILEWORLD_RESUME")]
    resume: bool,
    /// Stop after this many tiles, leaving a checkpoint.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Occupancy volume (OCCV).
    occupancy: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Occupancy volumes (OCCV).
    #[arg(required = true)]
    occupancy: Vec<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct ConformanceArgs {
    /// Service base URL.
    #[arg(long, env = "TILEWORLD_ENDPOINT")]
    endpoint: String,
    /// Restrict the checks to these roles.
    #[arg(long = "role")]
    roles: Vec<String>,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    /// Seed prompt.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 2)]
    width: u32,
    #[arg(long, default_value_t = 2)]
    height: u32,
    /// `mock` or a service URL for the prompt expander.
    #[arg(long, env = "TILEWORLD_ENDPOINTS")]
    endpoints: Option<String>,
    /// Write the spec here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8750", env = "TILEWORLD_BIND")]
    bind: String,
    /// Corrupt inpainting results outside the mask.
    #[arg(long)]
    adversarial: bool,
    /// Protocol version to report.
    #[arg(long)]
    protocol_version: Option<String>,
    /// File whose contents are returned verbatim by the prompt expander.
    #[arg(long)]
    expander_reply: Option<PathBuf>,
    /// TOML file with a `[mock]` section for fault injection.
    #[arg(long, env = "TILEWORLD_CONFIG")]
    config: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    endpoints: Option<String>,
    pipeline: PipelineConfig,
    mock: MockConfig,
}

fn load_config_file(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl Overrides {
    fn resolve(&self) -> Result<(ConfigFile, PipelineConfig), CliError> {
        let file = load_config_file(self.config.as_deref())?;
        let mut cfg = file.pipeline.clone();
        if let Some(v) = self.seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.retries {
            cfg.retry_budget = v;
        }
        if let Some(v) = self.band_r {
            cfg.band_half_width = v;
        }
        if let Some(v) = self.tau {
            cfg.cuts.tau = v;
        }
        if let Some(v) = self.delta {
            cfg.cuts.delta = v;
        }
        if let Some(v) = self.alpha {
            cfg.thresholds.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.thresholds.beta = v;
        }
        if let Some(v) = self.blend {
            cfg.blend = v.into();
        }
        cfg.validate()?;
        Ok((file, cfg))
    }

    fn thresholds(&self) -> Result<ValidationThresholds, CliError> {
        Ok(self.resolve()?.1.thresholds)
    }
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(ErrorKind::Other, e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn read_occupancy(path: &Path) -> Result<occupancy::OccupancyVolume, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    occupancy::read_occv(BufReader::new(f)).map_err(|e| CliError::format(path, e))
}

fn cmd_build(args: &BuildArgs) -> Result<(), CliError> {
    let (file, config) = args.overrides.resolve()?;
    let raw = fs::read(&args.spec).map_err(|e| CliError::io(&args.spec, e))?;
    let spec = worldspec::parse_world_spec(&raw).map_err(|e| CliError::format(&args.spec, e))?;
    let targets = endpoints::parse(
        args.endpoints
            .as_deref()
            .or(file.endpoints.as_deref())
            .unwrap_or("mock"),
    )?;
    let endpoints = endpoints::resolve(&targets, file.mock.clone());

    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let options = BuildOptions {
        checkpoint: Some(args.out.join("checkpoint")),
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let outcome = pipeline::build_world(&spec, &endpoints, &config, &options)?;
    let report = &outcome.report;
    if !report.complete {
        eprintln!(
            "stopped after {} of {} tiles; rerun with --resume",
            outcome.grid.cursor,
            spec.tiles().len()
        );
        return print_json(&serde_json::json!({ "complete": false, "tiles": outcome.grid.cursor }));
    }
    let summary = pipeline::export_world(&outcome.grid, report, &args.out)?;
    eprintln!(
        "built {}x{} world: {} tiles, {} retries, {} seams -> {}",
        report.width,
        report.height,
        report.tiles.len(),
        report.retries(),
        report.blends.len(),
        summary.world_ply.display()
    );
    print_json(&serde_json::json!({
        "complete": true,
        "export": summary,
        "metrics": report.metrics,
        "retries": report.retries(),
        "ground_spread": report.ground_spread,
    }))
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let thresholds = args.overrides.thresholds()?;
    let vol = read_occupancy(&args.occupancy)?;
    let report = occupancy::validate_tile(&vol, thresholds);
    eprintln!(
        "{}: {:?} {:?}",
        args.occupancy.display(),
        report.verdict,
        report.reject_reasons
    );
    print_json(&report)
}

fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let thresholds = args.overrides.thresholds()?;
    let mut files = Vec::new();
    let mut reports: Vec<ValidationReport> = Vec::new();
    for path in &args.occupancy {
        let report = occupancy::validate_tile(&read_occupancy(path)?, thresholds);
        files.push(serde_json::json!({ "path": path, "report": report }));
        reports.push(report);
    }
    print_json(
        &serde_json::json!({ "files": files, "metrics": pipeline::compute_metrics(&reports) }),
    )
}

fn cmd_conformance(args: &ConformanceArgs) -> Result<(), CliError> {
    let roles = args
        .roles
        .iter()
        .map(|r| Role::parse(r).ok_or_else(|| CliError::config(format!("unknown role `{r}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let client = RemoteClient::new(
        &args.endpoint,
        std::time::Duration::from_secs(args.timeout),
        0,
    );
    let report = conformance::run(&client, &roles);
    for c in &report.checks {
        eprintln!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    print_json(&report)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::new(
            ErrorKind::Conformance,
            format!("failed checks: {}", report.failed().join(", ")),
        ))
    }
}

fn cmd_expand(args: &ExpandArgs) -> Result<(), CliError> {
    let targets = endpoints::parse(args.endpoints.as_deref().unwrap_or("mock"))?;
    let endpoints = endpoints::resolve(&targets, MockConfig::default());
    let spec = endpoints
        .expander
        .expand(&args.prompt, args.width, args.height)
        .map_err(|e| CliError::new(ErrorKind::Format, e.to_string()))?;
    let json = spec.to_json();
    match &args.out {
        Some(path) => fs::write(path, json + "\n").map_err(|e| CliError::io(path, e)),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let file = load_config_file(args.config.as_deref())?;
    let expander_reply = match &args.expander_reply {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let defaults = ServerOptions::default();
    let options = ServerOptions {
        protocol_version: args
            .protocol_version
            .clone()
            .unwrap_or(defaults.protocol_version),
        adversarial: args.adversarial,
        expander_reply,
    };
    server::serve_blocking(Endpoints::mock(file.mock), options, &args.bind)
        .map_err(|e| CliError::new(ErrorKind::Io, format!("{}: {e}", args.bind)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TILEWORLD_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Conformance(a) => cmd_conformance(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Expand(a) => cmd_expand(a),
        Command::ServeMock(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
