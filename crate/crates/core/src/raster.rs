//! Raster helpers shared by the renderer and the 2D framing stage.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

/// Binary raster; `true` marks pixels to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dimensions() == other.dimensions()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    pub fn count_intersection(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn subtract(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !*b;
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel counts as set.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| {
            img.get_pixel(x, y)[0] != 0
        })
    }

    pub fn bounding_box(&self) -> Option<PixelRect> {
        bounding_box(self.width, self.height, |x, y| self.get(x, y))
    }
}

/// Axis-aligned pixel rectangle, `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

pub fn bounding_box(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Option<PixelRect> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let mut any = false;
    for y in 0..height {
        for x in 0..width {
            if f(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| PixelRect {
        x: x0 as i64,
        y: y0 as i64,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    })
}

pub fn transparent(width: u32, height: u32) -> RgbaImage {
    RgbaImage::from_pixel(width, height, Rgba([0, 0, 0, 0]))
}

/// Straight-alpha "over" compositing of one pixel.
pub fn over(src: Rgba<u8>, dst: Rgba<u8>) -> Rgba<u8> {
    let sa = src[3] as f32 / 255.0;
    let da = dst[3] as f32 / 255.0;
    let oa = sa + da * (1.0 - sa);
    if oa <= 0.0 {
        return Rgba([0, 0, 0, 0]);
    }
    let mut out = [0u8; 4];
    for c in 0..3 {
        let v = (src[c] as f32 * sa + dst[c] as f32 * da * (1.0 - sa)) / oa;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out[3] = (oa * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgba(out)
}

/// Composites `top` over `bottom` in place (same dimensions).
pub fn composite_over(bottom: &mut RgbaImage, top: &RgbaImage) {
    for (b, t) in bottom.pixels_mut().zip(top.pixels()) {
        if t[3] == 255 {
            *b = *t;
        } else if t[3] > 0 {
            *b = over(*t, *b);
        }
    }
}

/// Copies the `rect` region of `img`; pixels outside the source are transparent.
pub fn crop(img: &RgbaImage, rect: PixelRect) -> RgbaImage {
    RgbaImage::from_fn(rect.width, rect.height, |x, y| {
        let sx = rect.x + x as i64;
        let sy = rect.y + y as i64;
        if sx < 0 || sy < 0 || sx >= img.width() as i64 || sy >= img.height() as i64 {
            Rgba([0, 0, 0, 0])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// Mean absolute per-channel difference in [0, 1].
pub fn mean_abs_error(a: &RgbaImage, b: &RgbaImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "raster dimensions differ");
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(x, y)| (*x as i32 - *y as i32).unsigned_abs() as u64)
        .sum();
    total as f64 / (a.as_raw().len() as f64 * 255.0)
}

pub fn encode_png_rgba(img: &RgbaImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory");
    out.into_inner()
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory");
    out.into_inner()
}

pub fn decode_png_rgba(bytes: &[u8]) -> Result<RgbaImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgba8())
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

/// Point-in-convex-polygon test; vertices in either winding order.
pub fn inside_convex(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    if poly.len() < 3 {
        return false;
    }
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// repeating the first point.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], *p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], *p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Pixels whose centers fall inside the convex polygon.
pub fn rasterize_convex(width: u32, height: u32, poly: &[[f64; 2]]) -> Mask {
    let mut mask = Mask::new(width, height);
    if poly.len() < 3 {
        return mask;
    }
    let (x0, x1, y0, y1) = poly_pixel_bounds(poly, width, height);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside_convex(poly, [x as f64 + 0.5, y as f64 + 0.5]) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

pub(crate) fn poly_pixel_bounds(
    poly: &[[f64; 2]],
    width: u32,
    height: u32,
) -> (u32, u32, u32, u32) {
    let min_x = poly.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = poly.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
    (
        clamp(min_x.floor(), width),
        clamp(max_x.ceil() + 1.0, width),
        clamp(min_y.floor(), height),
        clamp(max_y.ceil() + 1.0, height),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_point() {
        let hull = convex_hull(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 2.0]]);
        assert_eq!(hull.len(), 4);
        assert!(inside_convex(&hull, [1.0, 1.5]));
        assert!(!inside_convex(&hull, [2.5, 1.0]));
    }

    #[test]
    fn rasterized_square_area() {
        let m = rasterize_convex(
            20,
            20,
            &[[2.0, 2.0], [12.0, 2.0], [12.0, 12.0], [2.0, 12.0]],
        );
        assert_eq!(m.count(), 100);
        assert_eq!(
            m.bounding_box(),
            Some(PixelRect {
                x: 2,
                y: 2,
                width: 10,
                height: 10
            })
        );
    }

    #[test]
    fn over_opaque_and_clear() {
        let red = Rgba([255, 0, 0, 255]);
        let clear = Rgba([0, 0, 0, 0]);
        assert_eq!(over(red, clear), red);
        assert_eq!(over(clear, red), red);
        assert_eq!(over(clear, clear), clear);
    }

    #[test]
    fn png_round_trip() {
        let img = RgbaImage::from_fn(5, 3, |x, y| {
            Rgba([x as u8 * 40, y as u8 * 80, 7, if x == 0 { 0 } else { 255 }])
        });
        assert_eq!(decode_png_rgba(&encode_png_rgba(&img)).unwrap(), img);
        let mask = Mask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(
            Mask::from_gray(&decode_png_gray(&encode_png_gray(&mask.to_gray())).unwrap()),
            mask
        );
    }
}
