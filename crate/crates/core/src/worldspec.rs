//! World specifications: the JSON schema describing a grid of tile prompts,
//! prompt composition, build order and per-tile context sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal token in the global prompt that is replaced by a tile prompt.
pub const TILE_PROMPT_PLACEHOLDER: &str = "{tile_prompt}";

#[derive(Debug, Error, PartialEq)]
pub enum WorldSpecError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("world spec has no tiles")]
    NoTiles,
    #[error("tile {0} lies outside the grid")]
    OutOfRange(TileCoord),
    #[error("tile {0} is listed more than once")]
    DuplicateTile(TileCoord),
    #[error("tile {0} is missing from the grid")]
    MissingTile(TileCoord),
    #[error("tile {0} has an empty prompt")]
    EmptyPrompt(TileCoord),
    #[error("global prompt must contain \"{TILE_PROMPT_PLACEHOLDER}\" exactly once (found {0})")]
    Placeholder(usize),
}

/// Integer grid coordinate. Ordered row-major (`y` first, then `x`), which is
/// also the build order of the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub x: i32,
    pub y: i32,
}

impl TileCoord {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    /// Chebyshev distance.
    pub fn chebyshev(self, other: TileCoord) -> u32 {
        (self.x - other.x)
            .unsigned_abs()
            .max((self.y - other.y).unsigned_abs())
    }

    pub fn is_four_adjacent(self, other: TileCoord) -> bool {
        (self.x - other.x).abs() + (self.y - other.y).abs() == 1
    }
}

impl Ord for TileCoord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for TileCoord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// One entry of the `"tiles"` array. Field order matches the JSON layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePrompt {
    pub prompt: String,
    pub x: i32,
    pub y: i32,
}

impl TilePrompt {
    pub fn coord(&self) -> TileCoord {
        TileCoord::new(self.x, self.y)
    }
}

#[derive(Serialize, Deserialize)]
struct RawWorldSpec {
    tiles: Vec<TilePrompt>,
    prompt: String,
}

/// A validated, rectangular world description. Tiles are stored in build
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldSpec {
    width: u32,
    height: u32,
    tiles: Vec<TilePrompt>,
    global_prompt: String,
}

/// How a tile prompt is combined with the global prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Replace the placeholder with the tile prompt.
    #[default]
    Substitute,
    /// Tile prompt followed by the global prompt with the placeholder removed.
    Concatenate,
}

impl WorldSpec {
    /// Builds a spec from tiles in any order, checking every schema rule.
    pub fn new(
        tiles: Vec<TilePrompt>,
        global_prompt: impl Into<String>,
    ) -> Result<Self, WorldSpecError> {
        let global_prompt = global_prompt.into();
        let occurrences = global_prompt.matches(TILE_PROMPT_PLACEHOLDER).count();
        if occurrences != 1 {
            return Err(WorldSpecError::Placeholder(occurrences));
        }
        if tiles.is_empty() {
            return Err(WorldSpecError::NoTiles);
        }
        let mut seen = BTreeSet::new();
        for tile in &tiles {
            let c = tile.coord();
            if c.x < 0 || c.y < 0 {
                return Err(WorldSpecError::OutOfRange(c));
            }
            if !seen.insert(c) {
                return Err(WorldSpecError::DuplicateTile(c));
            }
            if tile.prompt.trim().is_empty() {
                return Err(WorldSpecError::EmptyPrompt(c));
            }
        }
        let width = seen.iter().map(|c| c.x).max().unwrap_or(0) as u32 + 1;
        let height = seen.iter().map(|c| c.y).max().unwrap_or(0) as u32 + 1;
        for c in build_order(width, height).iter() {
            if !seen.contains(c) {
                return Err(WorldSpecError::MissingTile(*c));
            }
        }
        let mut tiles = tiles;
        tiles.sort_by_key(TilePrompt::coord);
        Ok(Self {
            width,
            height,
            tiles,
            global_prompt,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn tiles(&self) -> &[TilePrompt] {
        &self.tiles
    }

    pub fn global_prompt(&self) -> &str {
        &self.global_prompt
    }

    pub fn contains(&self, c: TileCoord) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as u32) < self.width && (c.y as u32) < self.height
    }

    pub fn tile_prompt(&self, c: TileCoord) -> Option<&str> {
        if !self.contains(c) {
            return None;
        }
        let idx = c.y as usize * self.width as usize + c.x as usize;
        Some(self.tiles[idx].prompt.as_str())
    }

    pub fn to_json(&self) -> String {
        let raw = RawWorldSpec {
            tiles: self.tiles.clone(),
            prompt: self.global_prompt.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("world spec serializes")
    }
}

/// Parses world-spec JSON: `{"tiles": [{"prompt", "x", "y"}...], "prompt": "..."}`.
pub fn parse_world_spec(raw: &[u8]) -> Result<WorldSpec, WorldSpecError> {
    let raw_spec: RawWorldSpec =
        serde_json::from_slice(raw).map_err(|e| WorldSpecError::Parse {
            offset: byte_offset(raw, e.line(), e.column()),
            message: e.to_string(),
        })?;
    WorldSpec::new(raw_spec.tiles, raw_spec.prompt)
}

/// serde_json reports 1-based line/column; convert to a byte offset.
fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in raw.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(raw.len());
        }
        offset += l.len() + 1;
    }
    raw.len()
}

/// Combines the tile prompt at `c` with the global prompt.
///
/// Panics if `c` is outside the grid.
pub fn compose_prompt(spec: &WorldSpec, c: TileCoord, mode: PromptMode) -> String {
    let tile = spec
        .tile_prompt(c)
        .unwrap_or_else(|| panic!("tile {c} outside the world grid"));
    match mode {
        PromptMode::Substitute => spec
            .global_prompt
            .replacen(TILE_PROMPT_PLACEHOLDER, tile, 1),
        PromptMode::Concatenate => {
            format!(
                "{tile}{}",
                spec.global_prompt.replacen(TILE_PROMPT_PLACEHOLDER, "", 1)
            )
        }
    }
}

/// Row-major build sequence over a W×H grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridOrder {
    sequence: Vec<TileCoord>,
}

impl GridOrder {
    pub fn iter(&self) -> std::slice::Iter<'_, TileCoord> {
        self.sequence.iter()
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn as_slice(&self) -> &[TileCoord] {
        &self.sequence
    }

    pub fn position(&self, c: TileCoord) -> Option<usize> {
        self.sequence.iter().position(|s| *s == c)
    }
}

pub fn build_order(width: u32, height: u32) -> GridOrder {
    let sequence = (0..height as i32)
        .flat_map(|y| (0..width as i32).map(move |x| TileCoord::new(x, y)))
        .collect();
    GridOrder { sequence }
}

/// True when `other` belongs to the set of tiles generated before `c`.
pub fn precedes(other: TileCoord, c: TileCoord) -> bool {
    other.y < c.y || (other.y == c.y && other.x < c.x)
}

/// Options controlling which generated tiles are rendered as context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextOptions {
    /// Chebyshev radius of the context window; `None` covers the whole grid.
    pub radius: Option<u32>,
    /// Duplicate tile (0, y−1) at (−1, y) for left-edge tiles.
    pub bootstrap: bool,
}

impl Default for ContextOptions {
    fn default() -> Self {
        Self {
            radius: None,
            bootstrap: true,
        }
    }
}

/// Temporary copy of a generated tile placed at a position outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualCopy {
    pub source: TileCoord,
    pub position: TileCoord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextSet {
    pub tiles: Vec<TileCoord>,
    pub virtual_copy: Option<VirtualCopy>,
}

/// Already-generated tiles that provide rendering context for `target`.
pub fn context_tiles(
    target: TileCoord,
    generated: &BTreeSet<TileCoord>,
    options: ContextOptions,
) -> ContextSet {
    let tiles: Vec<TileCoord> = generated
        .iter()
        .copied()
        .filter(|c| precedes(*c, target))
        .filter(|c| options.radius.is_none_or(|r| c.chebyshev(target) <= r))
        .collect();
    let virtual_copy = if options.bootstrap && target.x == 0 && target.y > 0 {
        let source = TileCoord::new(0, target.y - 1);
        generated.contains(&source).then_some(VirtualCopy {
            source,
            position: TileCoord::new(-1, target.y),
        })
    } else {
        None
    };
    ContextSet {
        tiles,
        virtual_copy,
    }
}
