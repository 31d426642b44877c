use image::RgbaImage;

use super::{GenError, ImageDistance};

const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SIGMA: f64 = 1.5;
const RADIUS: usize = 5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Multi-scale structural dissimilarity `1 − MS-SSIM`, averaged over the RGB
/// channels of the images flattened onto black.
#[derive(Debug, Clone, Copy)]
pub struct MsSsim {
    pub max_scales: usize,
}

impl Default for MsSsim {
    fn default() -> Self {
        Self {
            max_scales: WEIGHTS.len(),
        }
    }
}

impl ImageDistance for MsSsim {
    fn distance(&self, a: &RgbaImage, b: &RgbaImage) -> Result<f64, GenError> {
        if a.dimensions() != b.dimensions() {
            return Err(GenError::Param(format!(
                "image sizes differ: {:?} vs {:?}",
                a.dimensions(),
                b.dimensions()
            )));
        }
        if a.width() == 0 || a.height() == 0 {
            return Err(GenError::Param("empty image".into()));
        }
        Ok(1.0 - ms_ssim(a, b, self.max_scales))
    }
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn channel(img: &RgbaImage, ch: usize) -> Self {
        let data = img
            .pixels()
            .map(|p| p[ch] as f64 * p[3] as f64 / (255.0 * 255.0))
            .collect();
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            data,
        }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = ((self.w / 2).max(1), (self.h / 2).max(1));
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < self.w && sy < self.h {
                        acc += self.data[sy * self.w + sx];
                        n += 1.0;
                    }
                }
                data[y * w + x] = acc / n;
            }
        }
        Plane { w, h, data }
    }

    /// Separable gaussian filter; taps falling outside are dropped and the
    /// remaining weights renormalized.
    fn blur(&self, kernel: &[f64]) -> Plane {
        let pass = |src: &[f64], w: usize, h: usize, horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for (i, k) in kernel.iter().enumerate() {
                        let off = i as isize - RADIUS as isize;
                        let (sx, sy) = if horizontal {
                            (x as isize + off, y as isize)
                        } else {
                            (x as isize, y as isize + off)
                        };
                        if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                            acc += k * src[sy as usize * w + sx as usize];
                            norm += k;
                        }
                    }
                    out[y * w + x] = acc / norm;
                }
            }
            out
        };
        let tmp = pass(&self.data, self.w, self.h, true);
        Plane {
            w: self.w,
            h: self.h,
            data: pass(&tmp, self.w, self.h, false),
        }
    }
}

fn kernel() -> Vec<f64> {
    (0..=2 * RADIUS)
        .map(|i| {
            let d = i as f64 - RADIUS as f64;
            (-d * d / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect()
}

/// `(mean luminance·contrast·structure, mean contrast·structure)`.
fn ssim_terms(x: &Plane, y: &Plane, k: &[f64]) -> (f64, f64) {
    let mx = x.blur(k);
    let my = y.blur(k);
    let sxx = x.zip(x, |a, b| a * b).blur(k);
    let syy = y.zip(y, |a, b| a * b).blur(k);
    let sxy = x.zip(y, |a, b| a * b).blur(k);
    let n = x.data.len() as f64;
    let (mut full, mut cs) = (0.0, 0.0);
    for i in 0..x.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = sxx.data[i] - ux * ux;
        let vy = syy.data[i] - uy * uy;
        let cxy = sxy.data[i] - ux * uy;
        let c = (2.0 * cxy + C2) / (vx + vy + C2);
        let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        full += l * c;
        cs += c;
    }
    (full / n, cs / n)
}

/// MS-SSIM in `[0, 1]` over at most `max_scales` dyadic scales; smaller
/// images use fewer scales with renormalized weights.
pub fn ms_ssim(a: &RgbaImage, b: &RgbaImage, max_scales: usize) -> f64 {
    let min_side = a.width().min(a.height()) as usize;
    let mut scales = 1;
    while scales < max_scales.min(WEIGHTS.len()) && min_side >> scales >= 2 * RADIUS + 1 {
        scales += 1;
    }
    let total: f64 = WEIGHTS[..scales].iter().sum();
    let k = kernel();
    let mut acc = 0.0;
    for ch in 0..3 {
        let mut x = Plane::channel(a, ch);
        let mut y = Plane::channel(b, ch);
        let mut value = 1.0;
        for s in 0..scales {
            let (full, cs) = ssim_terms(&x, &y, &k);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(WEIGHTS[s] / total);
            if s + 1 < scales {
                x = x.downsample();
                y = y.downsample();
            }
        }
        acc += value;
    }
    acc / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;

    fn pattern(seed: u32) -> RgbaImage {
        RgbaImage::from_fn(64, 48, |x, y| {
            let v = ((x * 7 + y * 13 + seed * 31) % 97) as u8;
            Rgba([v.wrapping_mul(2), 255 - v, ((x ^ y) * 5) as u8, 255])
        })
    }

    #[test]
    fn identity_is_zero() {
        let a = pattern(1);
        assert_eq!(MsSsim::default().distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_bounded() {
        let (a, b) = (pattern(1), pattern(2));
        let d = MsSsim::default();
        let ab = d.distance(&a, &b).unwrap();
        assert!((ab - d.distance(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn closer_image_scores_lower() {
        let a = pattern(1);
        let mut slight = a.clone();
        for p in slight.pixels_mut().step_by(17) {
            p[0] = p[0].saturating_add(20);
        }
        let d = MsSsim::default();
        assert!(d.distance(&a, &slight).unwrap() < d.distance(&a, &pattern(5)).unwrap());
    }

    #[test]
    fn tiny_images_and_size_mismatch() {
        let a = RgbaImage::from_pixel(3, 3, Rgba([10, 20, 30, 255]));
        assert_eq!(MsSsim::default().distance(&a, &a).unwrap(), 0.0);
        assert!(MsSsim::default()
            .distance(&a, &RgbaImage::new(4, 3))
            .is_err());
    }
}
