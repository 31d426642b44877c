//! Seed derivation shared by the pipeline and the mocks.

use crate::worldspec::TileCoord;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn coord_key(c: TileCoord) -> u64 {
    ((c.x as u32 as u64) << 32) | c.y as u32 as u64
}

/// Seed of the first attempt at tile `c`:
/// `splitmix64(master ^ splitmix64((x << 32) | y))` with `x`, `y` as u32.
pub fn tile_seed(master: u64, c: TileCoord) -> u64 {
    splitmix64(master ^ splitmix64(coord_key(c)))
}

/// Seed of retry `attempt`; each retry adds one.
pub fn attempt_seed(tile_seed: u64, attempt: u32) -> u64 {
    tile_seed.wrapping_add(attempt as u64)
}

/// Noise seed of the blend pass over the seam between `a` and `b`.
pub fn blend_seed(master: u64, a: TileCoord, b: TileCoord) -> u64 {
    splitmix64(tile_seed(master, a) ^ splitmix64(coord_key(b)).rotate_left(17))
}

/// Noise seed for latent upsampling of a tile accepted with `seed`.
pub fn upsample_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x5EED_0F_u64.rotate_left(40))
}
