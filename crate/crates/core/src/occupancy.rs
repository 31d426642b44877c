//! Binary occupancy volumes and the geometric acceptance tests for
//! generated tiles: footprint area, squareness and base completeness.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Squareness threshold; 1 requires equal extents.
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.95;
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("occupancy volume is empty")]
    Empty,
    #[error("occupancy format: {0}")]
    Format(String),
    #[error("occupancy I/O: {0}")]
    Io(#[from] io::Error),
}

/// Binary voxel grid indexed `(u, v, w)` with `w` vertical. Usually cubic
/// (R×R×R); cropped volumes may have unequal sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyVolume {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl OccupancyVolume {
    pub fn new(resolution: usize) -> Self {
        Self::with_dims([resolution; 3])
    }

    pub fn with_dims(dims: [usize; 3]) -> Self {
        Self {
            dims,
            cells: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Side length of a cubic volume (the u extent otherwise).
    pub fn resolution(&self) -> usize {
        self.dims[0]
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    fn index(&self, u: usize, v: usize, w: usize) -> usize {
        u + self.dims[0] * (v + self.dims[1] * w)
    }

    pub fn get(&self, u: usize, v: usize, w: usize) -> bool {
        self.cells[self.index(u, v, w)]
    }

    /// Bounds-checked lookup with signed indices.
    pub fn get_signed(&self, u: i64, v: i64, w: i64) -> bool {
        if u < 0 || v < 0 || w < 0 {
            return false;
        }
        let (u, v, w) = (u as usize, v as usize, w as usize);
        u < self.dims[0] && v < self.dims[1] && w < self.dims[2] && self.get(u, v, w)
    }

    pub fn set(&mut self, u: usize, v: usize, w: usize, value: bool) {
        let i = self.index(u, v, w);
        self.cells[i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Active voxels in `u`-fastest order.
    pub fn active(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [du, dv, _] = self.dims;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(move |(i, _)| [i % du, (i / du) % dv, i / (du * dv)])
    }

    /// Inner product of two volumes of equal shape.
    pub fn dot(&self, other: &OccupancyVolume) -> usize {
        assert_eq!(self.dims, other.dims, "volume shapes differ");
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Rotates a volume with equal u/v sides by `k` quarter turns about the
    /// vertical axis; one turn maps `(u, v)` to `(R−1−v, u)`.
    pub fn rotated_quarter(&self, k: u8) -> OccupancyVolume {
        assert_eq!(
            self.dims[0], self.dims[1],
            "quarter turns need equal horizontal sides"
        );
        let r = self.dims[0];
        let mut out = OccupancyVolume::with_dims(self.dims);
        for [u, v, w] in self.active() {
            let (nu, nv) = rotate_index(u, v, r, k);
            out.set(nu, nv, w, true);
        }
        out
    }

    pub fn mirrored_u(&self) -> OccupancyVolume {
        let mut out = OccupancyVolume::with_dims(self.dims);
        for [u, v, w] in self.active() {
            out.set(self.dims[0] - 1 - u, v, w, true);
        }
        out
    }
}

pub(crate) fn rotate_index(u: usize, v: usize, r: usize, k: u8) -> (usize, usize) {
    match k % 4 {
        0 => (u, v),
        1 => (r - 1 - v, u),
        2 => (r - 1 - u, r - 1 - v),
        _ => (v, r - 1 - u),
    }
}

/// Bounding box of the active voxels in one horizontal slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceBox {
    pub u_min: usize,
    pub u_max: usize,
    pub v_min: usize,
    pub v_max: usize,
}

impl SliceBox {
    pub fn ext_u(&self) -> usize {
        1 + self.u_max - self.u_min
    }

    pub fn ext_v(&self) -> usize {
        1 + self.v_max - self.v_min
    }

    pub fn area(&self) -> usize {
        self.ext_u() * self.ext_v()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extents {
    pub ext_u: usize,
    pub ext_v: usize,
    /// Bounding box per height `w`, `None` for empty slices.
    pub per_height: Vec<Option<SliceBox>>,
}

pub fn footprint_extents(volume: &OccupancyVolume) -> Extents {
    let mut per_height: Vec<Option<SliceBox>> = vec![None; volume.dims[2]];
    for [u, v, w] in volume.active() {
        let b = per_height[w].get_or_insert(SliceBox {
            u_min: u,
            u_max: u,
            v_min: v,
            v_max: v,
        });
        b.u_min = b.u_min.min(u);
        b.u_max = b.u_max.max(u);
        b.v_min = b.v_min.min(v);
        b.v_max = b.v_max.max(v);
    }
    let global = per_height
        .iter()
        .flatten()
        .copied()
        .reduce(|a, b| SliceBox {
            u_min: a.u_min.min(b.u_min),
            u_max: a.u_max.max(b.u_max),
            v_min: a.v_min.min(b.v_min),
            v_max: a.v_max.max(b.v_max),
        });
    Extents {
        ext_u: global.map_or(0, |b| b.ext_u()),
        ext_v: global.map_or(0, |b| b.ext_v()),
        per_height,
    }
}

/// Base template: the perimeter ring of the largest slice's bounding box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseTemplate {
    pub ring: OccupancyVolume,
    pub w_star: usize,
    pub slice: SliceBox,
}

/// Ring membership on integer indices: the normalized distance
/// `|2u − u_max − u_min| / (u_max − u_min)` equals 1 exactly when `u` is
/// one of the two bounds. A degenerate axis (extent 1) counts every voxel.
fn on_ring_axis(u: usize, lo: usize, hi: usize) -> bool {
    hi == lo || (2 * u).abs_diff(hi + lo) == hi - lo
}

pub fn base_template(volume: &OccupancyVolume) -> Result<BaseTemplate, OccupancyError> {
    let ext = footprint_extents(volume);
    let mut best: Option<(usize, SliceBox)> = None;
    for (w, b) in ext.per_height.iter().enumerate() {
        if let Some(b) = b {
            // Strict comparison keeps the lowest height on ties.
            if best.is_none_or(|(_, cur)| b.area() > cur.area()) {
                best = Some((w, *b));
            }
        }
    }
    let (w_star, slice) = best.ok_or(OccupancyError::Empty)?;
    let mut ring = OccupancyVolume::with_dims(volume.dims);
    for v in slice.v_min..=slice.v_max {
        for u in slice.u_min..=slice.u_max {
            if on_ring_axis(u, slice.u_min, slice.u_max)
                || on_ring_axis(v, slice.v_min, slice.v_max)
            {
                ring.set(u, v, w_star, true);
            }
        }
    }
    Ok(BaseTemplate {
        ring,
        w_star,
        slice,
    })
}

/// `(V · V_B) / (V_B · V_B)`.
pub fn completeness(volume: &OccupancyVolume, template: &OccupancyVolume) -> f64 {
    let denom = template.dot(template);
    if denom == 0 {
        return 0.0;
    }
    volume.dot(template) as f64 / denom as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Area,
    Squareness,
    Completeness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ext_u: usize,
    pub ext_v: usize,
    pub base_area: u64,
    pub squareness: f64,
    pub completeness: f64,
    pub verdict: Verdict,
    pub reject_reasons: Vec<RejectReason>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationThresholds {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

/// Area, squareness and completeness tests on a generated tile. Area and
/// squareness use the global footprint extents; the ring template uses the
/// largest slice.
pub fn validate_tile(
    volume: &OccupancyVolume,
    thresholds: ValidationThresholds,
) -> ValidationReport {
    let ext = footprint_extents(volume);
    let r = volume.dims[0].max(volume.dims[1]) as u64;
    let area = (ext.ext_u * ext.ext_v) as u64;
    let (lo, hi) = (ext.ext_u.min(ext.ext_v), ext.ext_u.max(ext.ext_v));
    let squareness = if hi == 0 { 0.0 } else { lo as f64 / hi as f64 };
    let completeness = base_template(volume).map_or(0.0, |t| completeness(volume, &t.ring));

    let mut reasons = Vec::new();
    // area < (R/2)² without rounding: 4·area < R².
    if 4 * area < r * r {
        reasons.push(RejectReason::Area);
    }
    if hi == 0 || (lo as f64) < thresholds.alpha * hi as f64 {
        reasons.push(RejectReason::Squareness);
    }
    if completeness < thresholds.beta {
        reasons.push(RejectReason::Completeness);
    }
    ValidationReport {
        ext_u: ext.ext_u,
        ext_v: ext.ext_v,
        base_area: area,
        squareness,
        completeness,
        verdict: if reasons.is_empty() {
            Verdict::Accept
        } else {
            Verdict::Reject
        },
        reject_reasons: reasons,
    }
}

const OCCV_MAGIC: &[u8; 4] = b"OCCV";
pub const OCCV_VERSION: u16 = 1;

/// Writes the 16-byte header (magic, version, R, reserved) followed by R³
/// bits, least significant bit first, `u` fastest.
pub fn write_occv(volume: &OccupancyVolume, mut out: impl Write) -> Result<(), OccupancyError> {
    if !volume.is_cubic() {
        return Err(OccupancyError::Format(format!(
            "cannot encode non-cubic volume {:?}",
            volume.dims
        )));
    }
    let r = u16::try_from(volume.dims[0])
        .map_err(|_| OccupancyError::Format("resolution exceeds u16".into()))?;
    let mut header = [0u8; 16];
    header[..4].copy_from_slice(OCCV_MAGIC);
    header[4..6].copy_from_slice(&OCCV_VERSION.to_le_bytes());
    header[6..8].copy_from_slice(&r.to_le_bytes());
    out.write_all(&header)?;
    let mut bytes = vec![0u8; volume.cells.len().div_ceil(8)];
    for (i, c) in volume.cells.iter().enumerate() {
        if *c {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn encode_occv(volume: &OccupancyVolume) -> Result<Vec<u8>, OccupancyError> {
    let mut out = Vec::new();
    write_occv(volume, &mut out)?;
    Ok(out)
}

pub fn read_occv(mut input: impl Read) -> Result<OccupancyVolume, OccupancyError> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| OccupancyError::Format(format!("short header: {e}")))?;
    if &header[..4] != OCCV_MAGIC {
        return Err(OccupancyError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != OCCV_VERSION {
        return Err(OccupancyError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let r = u16::from_le_bytes([header[6], header[7]]) as usize;
    if r < 2 {
        return Err(OccupancyError::Format(format!("resolution {r} below 2")));
    }
    let n = r * r * r;
    let mut bytes = vec![0u8; n.div_ceil(8)];
    input
        .read_exact(&mut bytes)
        .map_err(|e| OccupancyError::Format(format!("truncated payload: {e}")))?;
    let cells = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
    Ok(OccupancyVolume {
        dims: [r; 3],
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slab(
        r: usize,
        u: std::ops::Range<usize>,
        v: std::ops::Range<usize>,
        w: usize,
    ) -> OccupancyVolume {
        let mut vol = OccupancyVolume::new(r);
        for vv in v {
            for uu in u.clone() {
                vol.set(uu, vv, w, true);
            }
        }
        vol
    }

    #[test]
    fn extents() {
        let full = slab(64, 0..64, 0..64, 0);
        let e = footprint_extents(&full);
        assert_eq!((e.ext_u, e.ext_v), (64, 64));
        let part = slab(64, 10..60, 5..55, 3);
        let e = footprint_extents(&part);
        assert_eq!((e.ext_u, e.ext_v), (50, 50));
        assert_eq!(
            e.per_height[3],
            Some(SliceBox {
                u_min: 10,
                u_max: 59,
                v_min: 5,
                v_max: 54
            })
        );
        let e = footprint_extents(&OccupancyVolume::new(64));
        assert_eq!((e.ext_u, e.ext_v), (0, 0));
    }

    #[test]
    fn templates() {
        let t = base_template(&slab(64, 0..64, 0..64, 0)).unwrap();
        assert_eq!((t.w_star, t.ring.count()), (0, 4 * 64 - 4));

        let t = base_template(&slab(8, 3..5, 3..5, 2)).unwrap();
        assert_eq!(t.ring.count(), 4);

        let mut two = slab(64, 0..64, 0..64, 3);
        for v in 0..32 {
            for u in 0..32 {
                two.set(u, v, 0, true);
            }
        }
        assert_eq!(base_template(&two).unwrap().w_star, 3);

        assert!(matches!(
            base_template(&OccupancyVolume::new(4)),
            Err(OccupancyError::Empty)
        ));

        // Single-row slice: the row itself is the template.
        let t = base_template(&slab(8, 1..7, 4..5, 0)).unwrap();
        assert_eq!(t.ring.count(), 6);
    }

    #[test]
    fn completeness_ratios() {
        let v = slab(64, 0..64, 0..64, 0);
        let t = base_template(&v).unwrap().ring;
        assert_eq!(completeness(&v, &t), 1.0);
        // Drop a quarter of the ring (63 of 252), keeping corners.
        let mut broken = v.clone();
        let mut removed = 0;
        for u in 1..63 {
            if removed == 63 {
                break;
            }
            broken.set(u, 0, 0, false);
            removed += 1;
        }
        broken.set(0, 1, 0, false);
        assert_eq!(completeness(&broken, &t), 0.75);
        assert_eq!(completeness(&slab(64, 0..64, 0..64, 5), &t), 0.0);
    }

    #[test]
    fn validation_verdicts() {
        let ideal = slab(64, 0..64, 0..64, 0);
        let r = validate_tile(&ideal, ValidationThresholds::default());
        assert_eq!(
            (r.base_area, r.squareness, r.completeness, r.verdict),
            (4096, 1.0, 1.0, Verdict::Accept)
        );

        let r = validate_tile(&slab(64, 0..60, 0..50, 0), ValidationThresholds::default());
        assert!((r.squareness - 50.0 / 60.0).abs() < 1e-12);
        assert_eq!(r.reject_reasons, vec![RejectReason::Squareness]);

        let r = validate_tile(&slab(64, 0..30, 0..30, 0), ValidationThresholds::default());
        assert_eq!(r.base_area, 900);
        assert_eq!(r.reject_reasons, vec![RejectReason::Area]);

        let r = validate_tile(&OccupancyVolume::new(64), ValidationThresholds::default());
        assert_eq!((r.ext_u, r.ext_v, r.verdict), (0, 0, Verdict::Reject));
        assert!(r.reject_reasons.contains(&RejectReason::Area));
    }

    #[test]
    fn occv_header_layout() {
        let mut v = OccupancyVolume::new(4);
        v.set(1, 0, 0, true);
        v.set(0, 0, 1, true);
        let bytes = encode_occv(&v).unwrap();
        assert_eq!(&bytes[..4], b"OCCV");
        assert_eq!(&bytes[4..8], &[1, 0, 4, 0]);
        assert_eq!(bytes.len(), 16 + 8);
        assert_eq!(bytes[16], 0b10);
        assert_eq!(bytes[18], 0b1);
        assert!(matches!(
            read_occv(&b"OCCX"[..]),
            Err(OccupancyError::Format(_))
        ));
    }

    fn arb_volume(max_r: usize) -> impl Strategy<Value = OccupancyVolume> {
        (2..=max_r).prop_flat_map(|r| {
            prop::collection::vec(prop::bool::weighted(0.3), r * r * r).prop_map(move |cells| {
                OccupancyVolume {
                    dims: [r; 3],
                    cells,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn occv_round_trip(v in arb_volume(9)) {
            prop_assert_eq!(read_occv(encode_occv(&v).unwrap().as_slice()).unwrap(), v);
        }

        #[test]
        fn completeness_is_monotone(v in arb_volume(7), extra in prop::collection::vec((0usize..7, 0usize..7, 0usize..7), 1..10)) {
            if let Ok(t) = base_template(&v) {
                let before = completeness(&v, &t.ring);
                let mut more = v.clone();
                let r = v.resolution();
                for (u, vv, w) in extra {
                    more.set(u % r, vv % r, w % r, true);
                }
                prop_assert!(completeness(&more, &t.ring) >= before);
            }
        }

        #[test]
        fn validation_is_rotation_and_mirror_invariant(v in arb_volume(8), k in 0u8..4) {
            let key = |r: ValidationReport| {
                let (lo, hi) = (r.ext_u.min(r.ext_v), r.ext_u.max(r.ext_v));
                (lo, hi, r.base_area, r.squareness, r.completeness, r.verdict, r.reject_reasons)
            };
            let base = key(validate_tile(&v, ValidationThresholds::default()));
            prop_assert_eq!(key(validate_tile(&v.rotated_quarter(k), ValidationThresholds::default())), base.clone());
            prop_assert_eq!(key(validate_tile(&v.mirrored_u(), ValidationThresholds::default())), base);
        }

        #[test]
        fn ring_lies_in_w_star_with_perimeter_count(v in arb_volume(8)) {
            if let Ok(t) = base_template(&v) {
                prop_assert!(t.ring.active().all(|[_, _, w]| w == t.w_star));
                let (eu, ev) = (t.slice.ext_u(), t.slice.ext_v());
                if eu >= 2 && ev >= 2 {
                    prop_assert_eq!(t.ring.count(), 2 * eu + 2 * ev - 4);
                }
            }
        }
    }
}
