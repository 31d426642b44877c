use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tileworld::genproto::mock::MockConfig;
use tileworld::genproto::server::{self, ServerOptions};
use tileworld::genproto::Endpoints;
use tileworld::occupancy::{encode_occv, OccupancyVolume};

const EXAMPLE_SPEC: &str = r#"{"tiles": [
{ "prompt": "ancient stone bridge over a stream", "x": 0, "y": 0 },
{ "prompt": "lively stream past mossy banks", "x": 1, "y": 0 },
{ "prompt": "serene pond reflecting moonlight", "x": 0, "y": 1 },
{ "prompt": "bustling medieval market street", "x": 1, "y": 1 } ],
"prompt": "{tile_prompt}, medieval setting, isometric view, glowing lanterns, soft shading, vibrant colors, detailed textures"}"#;

const ONE_TILE: &str =
    r#"{"tiles":[{"prompt":"quiet pond","x":0,"y":0}],"prompt":"{tile_prompt}, isometric"}"#;

fn tileworld(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tileworld"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("TILEWORLD_") {
            cmd.env_remove(k);
        }
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

/// Last stderr line parsed as the error object.
fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str::<Value>(line).unwrap_or_else(|e| panic!("{e}: {line}"))["error"].clone()
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p.to_str().unwrap().to_string()
}

fn occv(dir: &Path, name: &str, vol: &OccupancyVolume) -> String {
    let p = dir.join(name);
    fs::write(&p, encode_occv(vol).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn slab(ext: [usize; 2]) -> OccupancyVolume {
    let mut v = OccupancyVolume::new(64);
    for w in 0..3 {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                v.set(x, y, w, true);
            }
        }
    }
    v
}

#[test]
fn example_spec_builds_and_resumes_to_the_same_export() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "world.json", EXAMPLE_SPEC);
    let full = dir.path().join("full");
    let out = tileworld(&[
        "build",
        "--spec",
        &spec,
        "--endpoints",
        "mock",
        "--out",
        full.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["complete"], true);
    assert_eq!(summary["metrics"]["tiles"], 4);
    assert_eq!(summary["metrics"]["mean_base_area"], 4096.0);
    for f in ["world.ply", "manifest.json", "report.json"] {
        assert!(full.join(f).is_file(), "{f} missing");
    }
    let manifest: Value =
        serde_json::from_slice(&fs::read(full.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tiles"].as_array().unwrap().len(), 4);

    let part = dir.path().join("part");
    let p = part.to_str().unwrap();
    let first = tileworld(&["build", "--spec", &spec, "--out", p, "--stop-after", "2"]);
    assert_eq!(code(&first), 0);
    assert_eq!(stdout_json(&first)["complete"], false);
    let resumed = tileworld(&["build", "--spec", &spec, "--out", p, "--resume"]);
    assert_eq!(
        code(&resumed),
        0,
        "{}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    let resumed = stdout_json(&resumed);
    assert_eq!(
        resumed["export"]["ply_sha256"],
        summary["export"]["ply_sha256"]
    );
    assert_eq!(
        resumed["export"]["manifest_sha256"],
        summary["export"]["manifest_sha256"]
    );
}

#[test]
fn missing_spec_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tileworld(&[
        "build",
        "--spec",
        "/nonexistent/world.json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(stderr_error(&out)["kind"], "io");
}

#[test]
fn malformed_spec_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "bad.json",
        r#"{"tiles":[],"prompt":"{tile_prompt}"}"#,
    );
    let out = tileworld(&[
        "build",
        "--spec",
        &spec,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert_eq!(stderr_error(&out)["kind"], "format");
}

#[test]
fn out_of_range_thresholds_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "w.json", ONE_TILE);
    let out = tileworld(&[
        "build",
        "--spec",
        &spec,
        "--out",
        dir.path().to_str().unwrap(),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_error(&out)["message"]
        .as_str()
        .unwrap()
        .contains("alpha"));
    let out = tileworld(&[
        "build",
        "--spec",
        &spec,
        "--out",
        dir.path().to_str().unwrap(),
        "--band-r",
        "32",
    ]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&tileworld(&["build", "--spec"])), 2);
}

#[test]
fn flags_override_environment_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "w.json", ONE_TILE);
    let config = write(
        dir.path(),
        "run.toml",
        "endpoints = \"mock\"\n[pipeline]\nmaster_seed = 7\nretry_budget = 5\nblend = \"off\"\n[pipeline.cuts]\ntau = 0.2\n",
    );
    let out_dir = dir.path().join("w");
    let o = out_dir.to_str().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tileworld"))
        .args([
            "build",
            "--spec",
            &spec,
            "--out",
            o,
            "--config",
            &config,
            "--retries",
            "3",
        ])
        .env("TILEWORLD_RETRIES", "4")
        .env("TILEWORLD_DELTA", "0.02")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value =
        serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    let cfg = &report["config"];
    assert_eq!(cfg["master_seed"], 7);
    assert_eq!(cfg["retry_budget"], 3);
    assert_eq!(cfg["cuts"]["tau"], 0.2);
    assert_eq!(cfg["cuts"]["delta"], 0.02);
    assert_eq!(cfg["blend"], "off");
    assert_eq!(cfg["band_half_width"], 8);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "w.json", ONE_TILE);
    let config = write(dir.path(), "run.toml", "[pipeline]\nretries = 3\n");
    let out = tileworld(&[
        "build",
        "--spec",
        &spec,
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        &config,
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn validate_reports_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let ideal = occv(dir.path(), "ideal.occv", &slab([64, 64]));
    let out = tileworld(&["validate", &ideal]);
    assert_eq!(code(&out), 0);
    let r = stdout_json(&out);
    assert_eq!(
        (r["verdict"].as_str(), r["base_area"].as_u64()),
        (Some("accept"), Some(4096))
    );
    assert_eq!(
        (r["squareness"].as_f64(), r["completeness"].as_f64()),
        (Some(1.0), Some(1.0))
    );

    let small = occv(dir.path(), "small.occv", &slab([30, 30]));
    let r = stdout_json(&tileworld(&["validate", &small]));
    assert_eq!(r["verdict"], "reject");
    assert_eq!(r["reject_reasons"], serde_json::json!(["area"]));

    let empty = occv(dir.path(), "empty.occv", &OccupancyVolume::new(64));
    let r = stdout_json(&tileworld(&["validate", &empty]));
    assert_eq!(r["verdict"], "reject");
    assert_eq!(
        (r["ext_u"].as_u64(), r["ext_v"].as_u64()),
        (Some(0), Some(0))
    );

    let oblong = occv(dir.path(), "oblong.occv", &slab([60, 50]));
    assert_eq!(
        stdout_json(&tileworld(&["validate", &oblong, "--alpha", "0.8"]))["verdict"],
        "accept"
    );

    let junk = write(dir.path(), "junk.occv", "not a volume");
    assert_eq!(code(&tileworld(&["validate", &junk])), 4);
}

#[test]
fn metrics_average_the_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = occv(dir.path(), "a.occv", &slab([64, 64]));
    let b = occv(dir.path(), "b.occv", &slab([64, 32]));
    let out = tileworld(&["metrics", &a, &b]);
    assert_eq!(code(&out), 0);
    let m = &stdout_json(&out)["metrics"];
    assert_eq!(m["mean_base_area"], 3072.0);
    assert_eq!(m["mean_squareness"], 0.75);
}

#[test]
fn conformance_against_mock_services() {
    let good = server::spawn(
        Endpoints::mock(MockConfig::default()),
        ServerOptions::default(),
        "127.0.0.1:0",
    )
    .unwrap();
    let out = tileworld(&["conformance", "--endpoint", &good.url()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));

    let bad = server::spawn(
        Endpoints::mock(MockConfig::default()),
        ServerOptions {
            adversarial: true,
            ..ServerOptions::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let out = tileworld(&[
        "conformance",
        "--endpoint",
        &bad.url(),
        "--role",
        "inpainter-2d",
    ]);
    assert_eq!(code(&out), 6);
    let failed: Vec<String> = stdout_json(&out)["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failed, ["inpaint-outside-mask"]);
    assert!(stderr_error(&out)["message"]
        .as_str()
        .unwrap()
        .contains("inpaint-outside-mask"));

    let future = server::spawn(
        Endpoints::mock(MockConfig::default()),
        ServerOptions {
            protocol_version: "2.0".into(),
            ..ServerOptions::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let out = tileworld(&[
        "conformance",
        "--endpoint",
        &future.url(),
        "--role",
        "image-distance",
    ]);
    assert_eq!(code(&out), 6);
    let checks = stdout_json(&out)["checks"].clone();
    assert_eq!(checks[0]["name"], "version");
    assert_eq!(checks[0]["passed"], false);
}

#[test]
fn expand_writes_a_parseable_spec() {
    let out = tileworld(&[
        "expand",
        "--prompt",
        "harbor town",
        "--width",
        "3",
        "--height",
        "2",
    ]);
    assert_eq!(code(&out), 0);
    let spec = tileworld::worldspec::parse_world_spec(&out.stdout).unwrap();
    assert_eq!((spec.width(), spec.height()), (3, 2));
}
