use std::sync::OnceLock;

use tileworld::genproto::mock::{Fault, FaultKind, MockConfig};
use tileworld::genproto::Endpoints;
use tileworld::occupancy::RejectReason;
use tileworld::pipeline::{
    self, blend_pair, AttemptOutcome, BlendMode, BlendStatus, BuildOptions, PipelineConfig,
    PipelineError, WorldGrid,
};
use tileworld::splat::{Gaussian, SplatSet};
use tileworld::worldspec::{parse_world_spec, TileCoord, WorldSpec};

fn spec(width: i32, height: i32) -> WorldSpec {
    let tiles: Vec<String> = (0..height)
        .flat_map(|y| {
            (0..width).map(move |x| format!(r#"{{"prompt":"cottage {x} {y}","x":{x},"y":{y}}}"#))
        })
        .collect();
    parse_world_spec(
        format!(
            r#"{{"tiles":[{}],"prompt":"{{tile_prompt}}, isometric"}}"#,
            tiles.join(",")
        )
        .as_bytes(),
    )
    .unwrap()
}

fn unblended() -> PipelineConfig {
    PipelineConfig {
        blend: BlendMode::Off,
        ..PipelineConfig::default()
    }
}

fn build(
    spec: &WorldSpec,
    mock: MockConfig,
    config: &PipelineConfig,
) -> Result<WorldGrid, PipelineError> {
    pipeline::build_world(
        spec,
        &Endpoints::mock(mock),
        config,
        &BuildOptions::default(),
    )
    .map(|o| o.grid)
}

/// A 2x1 world without blending, shared by the tests that only read it.
fn pair() -> &'static WorldGrid {
    static GRID: OnceLock<WorldGrid> = OnceLock::new();
    GRID.get_or_init(|| build(&spec(2, 1), MockConfig::default(), &unblended()).unwrap())
}

fn outside_band(s: &SplatSet, half: f32) -> Vec<Gaussian> {
    s.iter()
        .filter(|g| (g.center[0] - 1.0).abs() > half)
        .copied()
        .collect()
}

#[test]
fn broken_border_costs_one_retry() {
    let t = TileCoord::new(1, 0);
    let mock = MockConfig {
        faults: vec![Fault {
            tile: t,
            kind: FaultKind::BrokenBorder,
            attempts: 1,
        }],
        random_rotation: false,
    };
    let grid = build(&spec(2, 1), mock, &unblended()).unwrap();
    assert!(grid.is_complete());
    let attempts = &grid.tiles[&t].attempts;
    assert_eq!(attempts.len(), 2);
    assert_ne!(attempts[0].outcome, AttemptOutcome::Accepted);
    assert_eq!(attempts[1].outcome, AttemptOutcome::Accepted);
    assert_ne!(attempts[0].seed, attempts[1].seed);
    assert_eq!(grid.tiles[&TileCoord::new(0, 0)].attempts.len(), 1);
}

#[test]
fn exhausted_budget_reports_every_attempt() {
    let t = TileCoord::new(0, 0);
    let mock = MockConfig {
        faults: vec![Fault {
            tile: t,
            kind: FaultKind::OffSquare,
            attempts: 9,
        }],
        random_rotation: false,
    };
    let config = PipelineConfig {
        retry_budget: 2,
        ..unblended()
    };
    match build(&spec(1, 1), mock, &config) {
        Err(PipelineError::RetryExhausted { tile, attempts }) => {
            assert_eq!(tile, t);
            assert_eq!(attempts.len(), 2);
            for a in &attempts {
                assert_eq!(a.outcome, AttemptOutcome::Rejected);
                assert!(a.report.reject_reasons.contains(&RejectReason::Squareness));
            }
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn only_neighbors_blend() {
    let mut grid = pair().clone();
    let ep = Endpoints::mock(MockConfig::default());
    let a = TileCoord::new(0, 0);
    let far = TileCoord::new(2, 0);
    assert!(matches!(
        blend_pair(&mut grid, a, far, &ep, &unblended()),
        Err(PipelineError::NotAdjacent { .. })
    ));
    assert!(matches!(
        blend_pair(&mut grid, a, a, &ep, &unblended()),
        Err(PipelineError::NotAdjacent { .. })
    ));
    assert_eq!(&grid, pair());
}

#[test]
fn blending_leaves_splats_away_from_the_seam() {
    let mut grid = pair().clone();
    let config = PipelineConfig::default();
    let ep = Endpoints::mock(MockConfig::default());
    let (a, b) = (TileCoord::new(0, 0), TileCoord::new(1, 0));
    let record = blend_pair(&mut grid, a, b, &ep, &config).unwrap();
    assert_eq!(record.status, BlendStatus::Blended);
    assert!(record.removed > 0 && record.added > 0);

    let half = config.band_half_width as f32 / config.latent_resolution as f32 + 0.05;
    for c in [a, b] {
        let before = &pair().tiles[&c].splats;
        let after = &grid.tiles[&c].splats;
        assert_eq!(
            outside_band(before, half),
            outside_band(after, half),
            "tile {c}"
        );
        assert_ne!(before, after);
        for g in after.iter() {
            let slot = [g.center[0].floor() as i32, g.center[1].floor() as i32];
            assert!(
                slot == [c.x, c.y] || (g.center[0] - 1.0).abs() > half,
                "seam splat of {c} outside its slot"
            );
        }
    }
}

#[test]
fn assembled_world_covers_the_footprint() {
    let grid = pair();
    let thickness = unblended().framing.slab.thickness;
    let world = pipeline::assemble(grid, thickness);
    let total: usize = grid.tiles.values().map(|t| t.splats.len()).sum();
    assert!(world.len() <= total && world.len() > total / 2);
    let (mut lo, mut hi) = ([f32::MAX; 2], [f32::MIN; 2]);
    for g in world.iter() {
        assert!(g.center[2] as f64 >= -thickness);
        for k in 0..2 {
            lo[k] = lo[k].min(g.center[k]);
            hi[k] = hi[k].max(g.center[k]);
        }
    }
    assert!(
        lo[0] > -0.05 && hi[0] < 2.05 && lo[1] > -0.05 && hi[1] < 1.05,
        "{lo:?} {hi:?}"
    );
    assert!(hi[0] > 1.5, "east tile missing");
}
