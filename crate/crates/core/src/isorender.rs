//! Software orthographic splat renderer with a fixed isometric vantage,
//! plus base-slab rendering, cube inpainting masks and tall-geometry
//! trimming.

use image::{GrayImage, Rgba, RgbaImage};
use nalgebra::{Matrix2, Matrix2x3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, Mask};
use crate::splat::SplatSet;
use crate::worldspec::TileCoord;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("camera scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("image size must be nonzero")]
    EmptyImage,
}

/// Fraction of the image width covered by one tile's footprint by default.
pub const DEFAULT_TILE_FRACTION: f64 = 0.4;
pub const DEFAULT_IMAGE_SIZE: u32 = 1024;
/// Mid-gray slab color.
pub const SLAB_GRAY: [u8; 3] = [128, 128, 128];
pub const DEFAULT_SLAB_THICKNESS: f64 = 0.08;
pub const DEFAULT_CUBE_HEIGHT: f64 = 1.0;
pub const DEFAULT_TRIM_HEIGHT: f64 = 0.75;

/// Orthographic camera. Azimuth 0 looks due north (−y); positive azimuth
/// swings the camera toward +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsometricCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// World units per pixel.
    pub scale: f64,
    /// Square image side in pixels.
    pub size: u32,
    pub principal_offset: [f64; 2],
    /// World point that projects to the image center (plus offset).
    pub look_at: [f64; 3],
}

impl Default for IsometricCamera {
    fn default() -> Self {
        Self::isometric(DEFAULT_IMAGE_SIZE, DEFAULT_TILE_FRACTION)
    }
}

/// Projected point: pixel coordinates and view depth (larger is farther).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub px: f64,
    pub py: f64,
    pub depth: f64,
}

impl IsometricCamera {
    /// Classic 2:1 isometric view where one tile footprint spans
    /// `tile_fraction` of the image width.
    pub fn isometric(size: u32, tile_fraction: f64) -> Self {
        let azimuth_deg: f64 = 45.0;
        let footprint_width =
            azimuth_deg.to_radians().cos().abs() + azimuth_deg.to_radians().sin().abs();
        Self {
            azimuth_deg,
            elevation_deg: (1.0 / 2f64.sqrt()).atan().to_degrees(),
            scale: footprint_width / (tile_fraction * size as f64),
            size,
            principal_offset: [0.0, 0.0],
            look_at: [0.0; 3],
        }
    }

    /// Same orientation and scale, panned to the center of `tile`'s cube.
    pub fn centered_on(&self, tile: TileCoord, cube_height: f64) -> Self {
        Self {
            look_at: [tile.x as f64 + 0.5, tile.y as f64 + 0.5, 0.5 * cube_height],
            ..*self
        }
    }

    pub fn check(&self) -> Result<(), RenderError> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(RenderError::InvalidScale(self.scale));
        }
        if self.size == 0 {
            return Err(RenderError::EmptyImage);
        }
        Ok(())
    }

    /// `(right, up, forward)` unit vectors.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (sa, ca) = self.azimuth_deg.to_radians().sin_cos();
        let (se, ce) = self.elevation_deg.to_radians().sin_cos();
        let right = [ca, -sa, 0.0];
        let up = [-sa * se, -ca * se, ce];
        let forward = [-sa * ce, -ca * ce, -se];
        (right, up, forward)
    }

    fn center_px(&self) -> [f64; 2] {
        let half = self.size as f64 / 2.0;
        [
            half + self.principal_offset[0],
            half + self.principal_offset[1],
        ]
    }

    pub fn project(&self, p: [f64; 3]) -> Projected {
        let (right, up, forward) = self.basis();
        let d = [
            p[0] - self.look_at[0],
            p[1] - self.look_at[1],
            p[2] - self.look_at[2],
        ];
        let c = self.center_px();
        Projected {
            px: c[0] + dot(d, right) / self.scale,
            py: c[1] - dot(d, up) / self.scale,
            depth: dot(d, forward),
        }
    }

    /// World-space origin (at depth 0) of the ray through pixel position
    /// `(px, py)`; the ray direction is `basis().2`.
    pub fn ray_origin(&self, px: f64, py: f64) -> [f64; 3] {
        let (right, up, _) = self.basis();
        let c = self.center_px();
        let a = (px - c[0]) * self.scale;
        let b = -(py - c[1]) * self.scale;
        [0, 1, 2].map(|i| self.look_at[i] + right[i] * a + up[i] * b)
    }

    /// Jacobian from world offsets to pixel offsets.
    fn jacobian(&self) -> Matrix2x3<f64> {
        let (right, up, _) = self.basis();
        let s = self.scale;
        Matrix2x3::new(
            right[0] / s,
            right[1] / s,
            right[2] / s,
            -up[0] / s,
            -up[1] / s,
            -up[2] / s,
        )
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameKind {
    BaseOnly,
    Context,
    InpaintResult,
    SeamView,
}

/// Where a framed image came from; lets test doubles regenerate content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tile: TileCoord,
    pub prompt: String,
    pub seed: u64,
}

/// RGBA raster with its camera, inpainting mask and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FramedImage {
    pub pixels: RgbaImage,
    pub mask: Mask,
    pub camera: IsometricCamera,
    pub kind: FrameKind,
    pub provenance: Option<Provenance>,
    /// Ground-truth foreground alpha from a synthetic compositor, if known.
    pub matte: Option<GrayImage>,
}

impl FramedImage {
    pub fn new(pixels: RgbaImage, camera: IsometricCamera, kind: FrameKind) -> Self {
        let mask = Mask::new(pixels.width(), pixels.height());
        Self {
            pixels,
            mask,
            camera,
            kind,
            provenance: None,
            matte: None,
        }
    }
}

struct Footprint {
    px: f64,
    py: f64,
    depth: f64,
    inv: Matrix2<f64>,
    half_w: f64,
    half_h: f64,
}

/// Mahalanobis cutoff (3σ) for splat footprints.
const CUTOFF_SQ: f64 = 9.0;
/// Screen-space dilation added to every projected covariance (pixels²).
const DILATION: f64 = 0.3;

fn footprints(scene: &SplatSet, camera: &IsometricCamera) -> Vec<Footprint> {
    let j = camera.jacobian();
    scene
        .iter()
        .map(|g| {
            let p = camera.project(g.center.map(f64::from));
            let cov = j * g.covariance() * j.transpose() + Matrix2::identity() * DILATION;
            let inv = cov.try_inverse().unwrap_or_else(Matrix2::identity);
            Footprint {
                px: p.px,
                py: p.py,
                depth: p.depth,
                inv,
                half_w: 3.0 * cov[(0, 0)].sqrt(),
                half_h: 3.0 * cov[(1, 1)].sqrt(),
            }
        })
        .collect()
}

/// Pixel range `[lo, hi)` covered by a footprint, clamped to the image.
fn footprint_span(f: &Footprint, size: u32) -> Option<(u32, u32, u32, u32)> {
    let s = size as f64;
    let x0 = (f.px - f.half_w - 0.5).floor().max(0.0);
    let x1 = (f.px + f.half_w + 0.5).ceil().min(s);
    let y0 = (f.py - f.half_h - 0.5).floor().max(0.0);
    let y1 = (f.py + f.half_h + 0.5).ceil().min(s);
    (x0 < x1 && y0 < y1).then_some((x0 as u32, x1 as u32, y0 as u32, y1 as u32))
}

fn weight(f: &Footprint, x: u32, y: u32) -> Option<f64> {
    let dx = x as f64 + 0.5 - f.px;
    let dy = y as f64 + 0.5 - f.py;
    let m = f.inv[(0, 0)] * dx * dx + 2.0 * f.inv[(0, 1)] * dx * dy + f.inv[(1, 1)] * dy * dy;
    (m <= CUTOFF_SQ).then(|| (-0.5 * m).exp())
}

/// Back-to-front order: farthest first, ties broken by splat index.
fn painter_order(fps: &[Footprint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fps.len()).collect();
    order.sort_by(|a, b| fps[*b].depth.total_cmp(&fps[*a].depth).then(a.cmp(b)));
    order
}

/// Depth-sorted alpha-composited orthographic splatting.
pub fn render_splats(
    scene: &SplatSet,
    camera: &IsometricCamera,
) -> Result<FramedImage, RenderError> {
    camera.check()?;
    let size = camera.size;
    let n = (size * size) as usize;
    let mut premult = vec![[0f32; 4]; n];
    let fps = footprints(scene, camera);
    for idx in painter_order(&fps) {
        let f = &fps[idx];
        let g = &scene.gaussians[idx];
        let color = g.color.map(|c| c as f32 / 255.0);
        let Some((x0, x1, y0, y1)) = footprint_span(f, size) else {
            continue;
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let Some(w) = weight(f, x, y) else { continue };
                let a = (g.opacity as f64 * w).min(1.0) as f32;
                if a <= 0.0 {
                    continue;
                }
                let px = &mut premult[(y * size + x) as usize];
                for c in 0..3 {
                    px[c] = a * color[c] + (1.0 - a) * px[c];
                }
                px[3] = a + (1.0 - a) * px[3];
            }
        }
    }
    let pixels = RgbaImage::from_fn(size, size, |x, y| {
        let p = premult[(y * size + x) as usize];
        let a = p[3];
        if a <= 0.0 {
            return Rgba([0, 0, 0, 0]);
        }
        let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let alpha = to_u8(a);
        if alpha == 0 {
            return Rgba([0, 0, 0, 0]);
        }
        Rgba([to_u8(p[0] / a), to_u8(p[1] / a), to_u8(p[2] / a), alpha])
    });
    Ok(FramedImage::new(pixels, *camera, FrameKind::Context))
}

/// Gray platform under a tile. Footprint is the unit tile square grown by
/// `margin` on each side; the top face sits at z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlabParams {
    pub margin: f64,
    pub thickness: f64,
    pub color: [u8; 3],
}

impl Default for SlabParams {
    fn default() -> Self {
        Self {
            margin: 0.0,
            thickness: DEFAULT_SLAB_THICKNESS,
            color: SLAB_GRAY,
        }
    }
}

/// Relative brightness of slab faces: top, x-facing, y-facing.
const FACE_SHADE: [f64; 3] = [1.0, 0.8, 0.65];

/// Projected faces of the slab visible to `camera`, far to near, each with
/// its fill color.
fn slab_faces(
    camera: &IsometricCamera,
    tile: TileCoord,
    slab: &SlabParams,
) -> Vec<(Vec<[f64; 2]>, Rgba<u8>)> {
    let (x0, x1) = (
        tile.x as f64 - slab.margin,
        tile.x as f64 + 1.0 + slab.margin,
    );
    let (y0, y1) = (
        tile.y as f64 - slab.margin,
        tile.y as f64 + 1.0 + slab.margin,
    );
    let (z0, z1) = (-slab.thickness, 0.0);
    let (_, _, fwd) = camera.basis();
    let shade = |f: f64| {
        let c = slab
            .color
            .map(|c| (c as f64 * f).round().clamp(0.0, 255.0) as u8);
        Rgba([c[0], c[1], c[2], 255])
    };
    let proj = |p: [f64; 3]| {
        let q = camera.project(p);
        [q.px, q.py]
    };
    let mut faces = Vec::new();
    if slab.thickness > 0.0 {
        // Side faces whose outward normal points toward the camera.
        let x_face = if fwd[0] < 0.0 { x1 } else { x0 };
        let y_face = if fwd[1] < 0.0 { y1 } else { y0 };
        if fwd[0] != 0.0 {
            let quad = [
                [x_face, y0, z0],
                [x_face, y1, z0],
                [x_face, y1, z1],
                [x_face, y0, z1],
            ];
            faces.push((quad.map(proj).to_vec(), shade(FACE_SHADE[1])));
        }
        if fwd[1] != 0.0 {
            let quad = [
                [x0, y_face, z0],
                [x1, y_face, z0],
                [x1, y_face, z1],
                [x0, y_face, z1],
            ];
            faces.push((quad.map(proj).to_vec(), shade(FACE_SHADE[2])));
        }
    }
    if fwd[2] < 0.0 {
        let top = [[x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]];
        faces.push((top.map(proj).to_vec(), shade(FACE_SHADE[0])));
    }
    faces
}

/// Paints the slab opaquely over `img`.
pub fn draw_slab(
    img: &mut RgbaImage,
    camera: &IsometricCamera,
    tile: TileCoord,
    slab: &SlabParams,
) {
    for (poly, color) in slab_faces(camera, tile, slab) {
        let mask = raster::rasterize_convex(img.width(), img.height(), &poly);
        for (x, y, p) in img.enumerate_pixels_mut() {
            if mask.get(x, y) {
                *p = color;
            }
        }
    }
}

/// Pixels covered by the slab's top face only.
pub fn slab_top_mask(camera: &IsometricCamera, tile: TileCoord, slab: &SlabParams) -> Mask {
    let flat = SlabParams {
        thickness: 0.0,
        ..*slab
    };
    let faces = slab_faces(camera, tile, &flat);
    faces
        .last()
        .map(|(poly, _)| raster::rasterize_convex(camera.size, camera.size, poly))
        .unwrap_or_else(|| Mask::new(camera.size, camera.size))
}

/// Base image B: the empty slab under `tile`, everything else transparent.
pub fn render_base_slab(
    camera: &IsometricCamera,
    tile: TileCoord,
    slab: &SlabParams,
) -> Result<FramedImage, RenderError> {
    camera.check()?;
    let mut pixels = raster::transparent(camera.size, camera.size);
    draw_slab(&mut pixels, camera, tile, slab);
    Ok(FramedImage::new(pixels, *camera, FrameKind::BaseOnly))
}

/// Projected outline of the cube standing on `tile`.
pub fn cube_outline(camera: &IsometricCamera, tile: TileCoord, cube_height: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(8);
    for dz in [0.0, cube_height] {
        for dy in [0.0, 1.0] {
            for dx in [0.0, 1.0] {
                let p = camera.project([tile.x as f64 + dx, tile.y as f64 + dy, dz]);
                pts.push([p.px, p.py]);
            }
        }
    }
    raster::convex_hull(&pts)
}

pub fn cube_mask(camera: &IsometricCamera, tile: TileCoord, cube_height: f64) -> Mask {
    raster::rasterize_convex(
        camera.size,
        camera.size,
        &cube_outline(camera, tile, cube_height),
    )
}

/// Cube mask of `tile` minus the cube projections of generated tiles to its
/// west in the same row.
pub fn make_inpaint_mask<'a>(
    camera: &IsometricCamera,
    tile: TileCoord,
    generated: impl IntoIterator<Item = &'a TileCoord>,
    cube_height: f64,
) -> Mask {
    let mut mask = cube_mask(camera, tile, cube_height);
    for other in generated {
        if other.y == tile.y && other.x < tile.x {
            mask.subtract(&cube_mask(camera, *other, cube_height));
        }
    }
    mask
}

/// Depth at which the ray through pixel `(px, py)` enters the cube of
/// `tile`, if it hits it.
fn cube_entry_depth(
    camera: &IsometricCamera,
    tile: TileCoord,
    cube_height: f64,
    px: f64,
    py: f64,
) -> Option<f64> {
    let origin = camera.ray_origin(px, py);
    let (_, _, dir) = camera.basis();
    let lo = [tile.x as f64, tile.y as f64, 0.0];
    let hi = [tile.x as f64 + 1.0, tile.y as f64 + 1.0, cube_height];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let a = (lo[i] - origin[i]) / dir[i];
        let b = (hi[i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some(t0)
}

/// Removes gaussians above `trim_height` that would be drawn in front of any
/// part of the target tile's cube. Lower gaussians are always kept.
pub fn trim_tall_geometry(
    scene: &SplatSet,
    target: TileCoord,
    camera: &IsometricCamera,
    trim_height: f64,
    cube_height: f64,
) -> SplatSet {
    let outline = cube_outline(camera, target, cube_height);
    let cube = raster::rasterize_convex(camera.size, camera.size, &outline);
    let fps = footprints(scene, camera);
    let gaussians = scene
        .iter()
        .zip(&fps)
        .filter(|(g, f)| {
            if (g.center[2] as f64) <= trim_height {
                return true;
            }
            let Some((x0, x1, y0, y1)) = footprint_span(f, camera.size) else {
                return true;
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    if !cube.get(x, y) || weight(f, x, y).is_none() {
                        continue;
                    }
                    if let Some(entry) = cube_entry_depth(
                        camera,
                        target,
                        cube_height,
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                    ) {
                        if f.depth < entry {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .map(|(g, _)| *g)
        .collect();
    SplatSet::new(gaussians)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;

    fn small_camera() -> IsometricCamera {
        IsometricCamera::isometric(256, DEFAULT_TILE_FRACTION)
    }

    #[test]
    fn basis_is_orthonormal_and_frames_tiles() {
        let cam = IsometricCamera::default();
        let (r, u, f) = cam.basis();
        for (a, b) in [(r, u), (r, f), (u, f)] {
            assert!(dot(a, b).abs() < 1e-12);
        }
        for v in [r, u, f] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        // West tiles project to the left and are farther away; the previous
        // row is farther away too.
        let here = cam.project([0.5, 0.5, 0.0]);
        let west = cam.project([-0.5, 0.5, 0.0]);
        let north = cam.project([0.5, -0.5, 0.0]);
        assert!(west.px < here.px && west.depth > here.depth);
        assert!(north.depth > here.depth);
        // One footprint spans 40% of the image width.
        let a = cam.project([0.0, 1.0, 0.0]);
        let b = cam.project([1.0, 0.0, 0.0]);
        assert!(((b.px - a.px).abs() - 0.4 * 1024.0).abs() < 1e-9);
    }

    #[test]
    fn empty_scene_is_transparent() {
        let img = render_splats(&SplatSet::default(), &small_camera()).unwrap();
        assert!(img.pixels.pixels().all(|p| p[3] == 0));
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let cam = IsometricCamera {
            scale: 0.0,
            ..small_camera()
        };
        assert_eq!(
            render_splats(&SplatSet::default(), &cam).unwrap_err(),
            RenderError::InvalidScale(0.0)
        );
    }

    #[test]
    fn single_gaussian_blob_is_centered_on_projection() {
        let cam = small_camera();
        let set = SplatSet::new(vec![Gaussian::isotropic([0.0; 3], 0.03, [200, 10, 10])]);
        let img = render_splats(&set, &cam).unwrap();
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (x, y, p) in img.pixels.enumerate_pixels() {
            let w = p[3] as f64;
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
            sw += w;
        }
        let expect = cam.project([0.0; 3]);
        assert!(sw > 0.0);
        assert!((sx / sw - expect.px).abs() < 1.0 && (sy / sw - expect.py).abs() < 1.0);
    }

    #[test]
    fn nearer_gaussian_wins() {
        let cam = small_camera();
        let (_, _, f) = cam.basis();
        let near = Gaussian::isotropic(
            [
                (-f[0] * 0.5) as f32,
                (-f[1] * 0.5) as f32,
                (-f[2] * 0.5) as f32,
            ],
            0.05,
            [0, 0, 255],
        );
        let far = Gaussian::isotropic(
            [
                (f[0] * 0.5) as f32,
                (f[1] * 0.5) as f32,
                (f[2] * 0.5) as f32,
            ],
            0.05,
            [255, 0, 0],
        );
        for set in [vec![near, far], vec![far, near]] {
            let img = render_splats(&SplatSet::new(set), &cam).unwrap();
            let c = cam.project([0.0; 3]);
            let p = img.pixels.get_pixel(c.px as u32, c.py as u32);
            assert!(p[0] < 16 && p[2] > 239, "{p:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic_and_translates_with_scene() {
        let cam = small_camera();
        let set = SplatSet::new(
            (0..20)
                .map(|i| {
                    Gaussian::isotropic(
                        [i as f32 * 0.03, (i % 5) as f32 * 0.05, 0.0],
                        0.02,
                        [i as u8 * 10, 90, 30],
                    )
                })
                .collect(),
        );
        let a = render_splats(&set, &cam).unwrap();
        assert_eq!(a, render_splats(&set, &cam).unwrap());
        let (r, _, _) = cam.basis();
        let shift = 7.0 * cam.scale;
        let moved = set.translated([r[0] * shift, r[1] * shift, 0.0]);
        let b = render_splats(&moved, &cam).unwrap();
        for y in 0..cam.size {
            for x in 0..cam.size - 7 {
                let pa = a.pixels.get_pixel(x, y);
                let pb = b.pixels.get_pixel(x + 7, y);
                for c in 0..4 {
                    assert!((pa[c] as i32 - pb[c] as i32).abs() <= 1);
                }
            }
        }
    }

    fn slab_area(cam: &IsometricCamera, slab: &SlabParams) -> usize {
        render_base_slab(cam, TileCoord::new(0, 0), slab)
            .unwrap()
            .pixels
            .pixels()
            .filter(|p| p[3] > 0)
            .count()
    }

    #[test]
    fn base_slab_shapes() {
        let cam = IsometricCamera::default().centered_on(TileCoord::new(0, 0), 1.0);
        let img = render_base_slab(&cam, TileCoord::new(0, 0), &SlabParams::default()).unwrap();
        assert_eq!(img.kind, FrameKind::BaseOnly);
        // Every opaque pixel is a shade of the slab gray.
        assert!(img
            .pixels
            .pixels()
            .all(|p| p[3] == 0 || (p[0] == p[1] && p[1] == p[2])));
        // Analytic top-face area: the unit square projects to a rhombus of
        // area |det J| where J maps the ground plane to pixels.
        let (r, u, _) = cam.basis();
        let det = (r[0] * -u[1] - r[1] * -u[0]).abs() / (cam.scale * cam.scale);
        let flat = SlabParams {
            thickness: 0.0,
            ..SlabParams::default()
        };
        let top = slab_area(&cam, &flat) as f64;
        assert!((top - det).abs() / det < 0.01, "top {top} vs {det}");
        assert!(slab_area(&cam, &SlabParams::default()) as f64 > top);

        let zoomed = IsometricCamera {
            scale: cam.scale / 2.0,
            ..cam
        };
        let ratio = slab_area(&zoomed, &SlabParams::default()) as f64
            / slab_area(&cam, &SlabParams::default()) as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.02, "ratio {ratio}");
    }

    #[test]
    fn inpaint_masks() {
        let cam = IsometricCamera::isometric(256, 0.25).centered_on(TileCoord::new(1, 0), 1.0);
        let c = TileCoord::new;
        let full = cube_mask(&cam, c(1, 0), 1.0);
        assert_eq!(make_inpaint_mask(&cam, c(1, 0), &[], 1.0), full);

        let m = make_inpaint_mask(&cam, c(1, 0), &[c(0, 0)], 1.0);
        let west = cube_mask(&cam, c(0, 0), 1.0);
        // Pixel-set difference oracle.
        let oracle = Mask::from_fn(256, 256, |x, y| full.get(x, y) && !west.get(x, y));
        assert_eq!(m, oracle);
        assert!(m.count() < full.count() && !m.intersects(&west));

        let cam = cam.centered_on(c(0, 1), 1.0);
        assert_eq!(
            make_inpaint_mask(&cam, c(0, 1), &[c(0, 0), c(1, 0)], 1.0),
            cube_mask(&cam, c(0, 1), 1.0)
        );
    }

    #[test]
    fn trimming_removes_only_occluders() {
        let target = TileCoord::new(1, 1);
        let cam = IsometricCamera::isometric(256, 0.25).centered_on(target, 1.0);
        let flat = SplatSet::new(vec![
            Gaussian::isotropic([1.5, 0.5, 0.0], 0.05, [1, 2, 3]),
            Gaussian::isotropic([0.5, 1.5, 0.0], 0.05, [1, 2, 3]),
        ]);
        assert_eq!(trim_tall_geometry(&flat, target, &cam, 0.75, 1.0), flat);

        // A tower on the north-east tile sits at the same depth as the target
        // and overlaps its cube in the image.
        let tower = Gaussian::isotropic([1.8, 1.2, 1.2], 0.05, [9, 9, 9]);
        // Far behind the target along the view direction, no overlap.
        let behind = Gaussian::isotropic([-1.5, -1.5, 1.5], 0.05, [9, 9, 9]);
        let scene = SplatSet::new(vec![tower, behind]);
        let trimmed = trim_tall_geometry(&scene, target, &cam, 0.75, 1.0);
        assert_eq!(trimmed.gaussians, vec![behind]);
        assert_eq!(
            trim_tall_geometry(&trimmed, target, &cam, 0.75, 1.0),
            trimmed
        );
    }
}
