//! Gaussian splat sets and their binary PLY encoding.
//!
//! Scales are stored as linear standard deviations and opacity as a plain
//! value in [0, 1] (no log/logit activation), colors as 8-bit RGB.

use std::io::{self, BufRead, Read, Write};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub center: [f32; 3],
    pub scale: [f32; 3],
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation: [f32; 4],
    pub opacity: f32,
    pub color: [u8; 3],
}

impl Gaussian {
    pub fn isotropic(center: [f32; 3], sigma: f32, color: [u8; 3]) -> Self {
        Self {
            center,
            scale: [sigma; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 1.0,
            color,
        }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation.map(f64::from);
        let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::new(
            self.scale[0] as f64,
            self.scale[1] as f64,
            self.scale[2] as f64,
        ));
        let m = r.matrix() * s;
        m * m.transpose()
    }

    pub fn color_unit(&self) -> [f64; 3] {
        self.color.map(|c| c as f64 / 255.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatSet {
    pub gaussians: Vec<Gaussian>,
}

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("gaussian {index}: opacity {value} outside [0, 1]")]
    Opacity { index: usize, value: f32 },
    #[error("gaussian {index}: quaternion norm {norm} is not 1")]
    Quaternion { index: usize, norm: f32 },
    #[error("gaussian {index}: non-finite value")]
    NonFinite { index: usize },
}

impl SplatSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn extend(&mut self, other: &SplatSet) {
        self.gaussians.extend_from_slice(&other.gaussians);
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        for (index, g) in self.gaussians.iter().enumerate() {
            let all = g
                .center
                .iter()
                .chain(&g.scale)
                .chain(&g.rotation)
                .chain(std::iter::once(&g.opacity));
            if all.clone().any(|v| !v.is_finite()) {
                return Err(SplatError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(SplatError::Opacity {
                    index,
                    value: g.opacity,
                });
            }
            let norm = g.rotation.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(SplatError::Quaternion { index, norm });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the centers, `(min, max)`.
    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = self.gaussians.first()?;
        let mut lo = first.center;
        let mut hi = first.center;
        for g in &self.gaussians {
            for i in 0..3 {
                lo[i] = lo[i].min(g.center[i]);
                hi[i] = hi[i].max(g.center[i]);
            }
        }
        Some((lo, hi))
    }

    pub fn translated(&self, offset: [f64; 3]) -> SplatSet {
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let mut g = *g;
                for i in 0..3 {
                    g.center[i] = (g.center[i] as f64 + offset[i]) as f32;
                }
                g
            })
            .collect();
        SplatSet { gaussians }
    }

    /// Rotates by `k` quarter turns about the vertical line through `pivot`.
    /// One quarter turn maps `(dx, dy)` to `(−dy, dx)`.
    pub fn rotated_quarter(&self, k: u8, pivot: [f64; 2]) -> SplatSet {
        let k = k % 4;
        if k == 0 {
            return self.clone();
        }
        let q = quarter_turn_quaternion(k);
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let mut g = *g;
                let (dx, dy) = (g.center[0] as f64 - pivot[0], g.center[1] as f64 - pivot[1]);
                let (rx, ry) = rotate_quarter_xy(dx, dy, k);
                g.center[0] = (pivot[0] + rx) as f32;
                g.center[1] = (pivot[1] + ry) as f32;
                let [w, x, y, z] = g.rotation.map(f64::from);
                let r = q * Quaternion::new(w, x, y, z);
                let n = r.norm();
                g.rotation = [
                    (r.w / n) as f32,
                    (r.i / n) as f32,
                    (r.j / n) as f32,
                    (r.k / n) as f32,
                ];
                g
            })
            .collect();
        SplatSet { gaussians }
    }
}

/// `(dx, dy)` rotated by `k` quarter turns, exact for all `k`.
pub fn rotate_quarter_xy(dx: f64, dy: f64, k: u8) -> (f64, f64) {
    match k % 4 {
        0 => (dx, dy),
        1 => (-dy, dx),
        2 => (-dx, -dy),
        _ => (dy, -dx),
    }
}

fn quarter_turn_quaternion(k: u8) -> Quaternion<f64> {
    let half = std::f64::consts::FRAC_PI_4 * k as f64;
    Quaternion::new(half.cos(), 0.0, 0.0, half.sin())
}

const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "red", "green", "blue",
];

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("PLY I/O: {0}")]
    Io(#[from] io::Error),
    #[error("PLY header: {0}")]
    Header(String),
}

/// Writes binary little-endian PLY with the fixed splat property layout.
pub fn write_ply(splats: &SplatSet, mut out: impl Write) -> io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", splats.len()));
    for name in &PLY_PROPERTIES[..11] {
        header.push_str(&format!("property float {name}\n"));
    }
    for name in &PLY_PROPERTIES[11..] {
        header.push_str(&format!("property uchar {name}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(splats.len() * 47);
    for g in &splats.gaussians {
        for v in g
            .center
            .iter()
            .chain(&g.scale)
            .chain(&g.rotation)
            .chain(std::iter::once(&g.opacity))
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&g.color);
    }
    out.write_all(&buf)
}

pub fn encode_ply(splats: &SplatSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_ply(splats, &mut out).expect("writing PLY to memory");
    out
}

#[derive(Clone, Copy)]
enum PlyType {
    F32,
    F64,
    U8,
}

impl PlyType {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            "uchar" | "uint8" => Some(Self::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

/// Reads binary little-endian PLY; properties may appear in any order and
/// unknown float/uchar properties are skipped.
pub fn read_ply(input: impl Read) -> Result<SplatSet, PlyError> {
    let mut reader = io::BufReader::new(input);
    let mut line = String::new();
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        let trimmed = line.trim();
        if first {
            if trimmed != "ply" {
                return Err(PlyError::Header("missing magic".into()));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => {
                return Err(PlyError::Header(format!("unsupported format {other}")))
            }
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| PlyError::Header(format!("bad vertex count {n}")))?,
                )
            }
            ["element", other, ..] => {
                return Err(PlyError::Header(format!("unsupported element {other}")))
            }
            ["property", ty, name] => {
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| PlyError::Header(format!("unsupported type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["end_header"] => break,
            _ => return Err(PlyError::Header(format!("unexpected line {trimmed:?}"))),
        }
    }
    let count = count.ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    let mut slots = [usize::MAX; 14];
    for (i, name) in PLY_PROPERTIES.iter().enumerate() {
        slots[i] = props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| PlyError::Header(format!("missing property {name}")))?;
    }
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.size();
            Some(o)
        })
        .collect();
    let mut data = vec![0u8; stride * count];
    reader.read_exact(&mut data)?;
    let value = |rec: &[u8], p: usize| -> f64 {
        let o = offsets[p];
        match props[p].1 {
            PlyType::F32 => f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(rec[o..o + 8].try_into().unwrap()),
            PlyType::U8 => rec[o] as f64,
        }
    };
    let gaussians = data
        .chunks_exact(stride)
        .map(|rec| {
            let f = |i: usize| value(rec, slots[i]) as f32;
            Gaussian {
                center: [f(0), f(1), f(2)],
                scale: [f(3), f(4), f(5)],
                rotation: [f(6), f(7), f(8), f(9)],
                opacity: f(10),
                color: [11, 12, 13].map(|i| value(rec, slots[i]).clamp(0.0, 255.0) as u8),
            }
        })
        .collect();
    Ok(SplatSet { gaussians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_gaussian() -> impl Strategy<Value = Gaussian> {
        (
            prop::array::uniform3(-10.0f32..10.0),
            prop::array::uniform3(0.001f32..1.0),
            prop::array::uniform4(-1.0f32..1.0),
            0.0f32..=1.0,
            prop::array::uniform3(any::<u8>()),
        )
            .prop_map(|(center, scale, q, opacity, color)| {
                let n = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
                Gaussian {
                    center,
                    scale,
                    rotation: q.map(|v| v / n),
                    opacity,
                    color,
                }
            })
    }

    proptest! {
        #[test]
        fn ply_round_trip_is_exact(gs in prop::collection::vec(arb_gaussian(), 0..40)) {
            let set = SplatSet::new(gs);
            let back = read_ply(encode_ply(&set).as_slice()).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn four_quarter_turns_restore_centers(g in arb_gaussian(), px in -2.0f64..2.0, py in -2.0f64..2.0) {
            let set = SplatSet::new(vec![g]);
            let mut r = set.clone();
            for _ in 0..4 {
                r = r.rotated_quarter(1, [px, py]);
            }
            for i in 0..3 {
                prop_assert!((r.gaussians[0].center[i] - g.center[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_covariance() {
        let g = Gaussian {
            scale: [0.3, 0.1, 0.2],
            ..Gaussian::isotropic([1.0, 0.0, 0.0], 1.0, [0, 0, 0])
        };
        let r = SplatSet::new(vec![g])
            .rotated_quarter(1, [0.0, 0.0])
            .gaussians[0];
        assert!((r.center[0]).abs() < 1e-6 && (r.center[1] - 1.0).abs() < 1e-6);
        let cov = r.covariance();
        // The long x axis now lies along y.
        assert!((cov[(1, 1)] - 0.09).abs() < 1e-6);
        assert!((cov[(0, 0)] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn validation_flags_bad_values() {
        let mut g = Gaussian::isotropic([0.0; 3], 0.1, [1, 2, 3]);
        assert!(SplatSet::new(vec![g]).validate().is_ok());
        g.opacity = 1.5;
        assert!(matches!(
            SplatSet::new(vec![g]).validate(),
            Err(SplatError::Opacity { .. })
        ));
        g.opacity = 1.0;
        g.rotation = [2.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            SplatSet::new(vec![g]).validate(),
            Err(SplatError::Quaternion { .. })
        ));
    }

    #[test]
    fn rejects_ascii_ply() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(&text[..]), Err(PlyError::Header(_))));
    }
}
