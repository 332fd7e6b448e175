//! Pinhole depth rendering, deprojection, and the crop-and-resize used for
//! attention zooming.
//!
//! Pixel convention: native pixel `(r, c)` covers the continuous square
//! `[r, r+1) x [c, c+1)`; intrinsics address pixel centers by integer index.
//! Depth is the distance along the optical axis.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rows: usize,
    pub cols: usize,
    /// Camera-to-world rotation; columns are the camera x, y, z axes.
    pub rotation: Rotation3<f64>,
    pub position: Vec3,
    pub far_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub rows: usize,
    pub cols: usize,
    /// Distance from the camera to the table center.
    pub distance: f64,
    /// Angle between the optical axis and the downward vertical, degrees.
    pub tilt_deg: f64,
    /// Half-width of the table region imaged across the frame at zero tilt.
    pub view_extent: f64,
    pub far_clip: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            rows: 128,
            cols: 128,
            distance: 0.6,
            tilt_deg: 0.0,
            view_extent: 0.25,
            far_clip: 2.0,
        }
    }
}

impl CameraModel {
    pub fn from_config(cfg: &CameraConfig) -> Result<Self> {
        if cfg.rows == 0 || cfg.cols == 0 {
            return Err(Error::config("native_rows", "camera resolution must be positive"));
        }
        if !(cfg.distance > 0.0 && cfg.view_extent > 0.0) {
            return Err(Error::config("cam_distance", "distance and view extent must be positive"));
        }
        let f = (cfg.cols as f64 / 2.0) * cfg.distance / cfg.view_extent;
        Ok(Self::looking_at_table(
            f,
            cfg.rows,
            cfg.cols,
            cfg.distance,
            cfg.tilt_deg.to_radians(),
            cfg.far_clip,
        ))
    }

    /// Camera on a circle of radius `distance` in the world y-z plane,
    /// aimed at the table origin; `tilt = 0` is straight down.
    pub fn looking_at_table(f: f64, rows: usize, cols: usize, distance: f64, tilt: f64, far_clip: f64) -> Self {
        let (s, c) = tilt.sin_cos();
        let x = Vector3::new(1.0, 0.0, 0.0);
        let y = Vector3::new(0.0, -c, -s);
        let z = Vector3::new(0.0, s, -c);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        Self {
            fx: f,
            fy: f,
            cx: (cols as f64 - 1.0) / 2.0,
            cy: (rows as f64 - 1.0) / 2.0,
            rows,
            cols,
            rotation,
            position: Vector3::new(0.0, -distance * s, distance * c),
            far_clip,
        }
    }

    /// Ray through pixel index coordinates; the direction has unit
    /// optical-axis component so the hit parameter is the depth.
    pub fn ray(&self, row: f64, col: f64) -> (Vec3, Vec3) {
        let d_cam = Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0);
        (self.position, self.rotation * d_cam)
    }

    pub fn camera_to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.position
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.position)
    }

    /// Projects a world point to `(row, col)` index coordinates and depth.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        (self.cy + self.fy * c.y / c.z, self.cx + self.fx * c.x / c.z, c.z)
    }

    pub fn full_window(&self) -> CropWindow {
        CropWindow::full(self.rows, self.cols)
    }
}

/// Sub-rectangle of the native frame, in continuous native pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub origin_row: f64,
    pub origin_col: f64,
    pub size_rows: f64,
    pub size_cols: f64,
    pub composed_scale: f64,
    pub native_rows: usize,
    pub native_cols: usize,
}

impl CropWindow {
    pub fn full(native_rows: usize, native_cols: usize) -> Self {
        Self {
            origin_row: 0.0,
            origin_col: 0.0,
            size_rows: native_rows as f64,
            size_cols: native_cols as f64,
            composed_scale: 1.0,
            native_rows,
            native_cols,
        }
    }

    /// Continuous native coordinates of the center of pixel `(i, j)` of an
    /// `res`-sized image of this window.
    pub fn pixel_to_native(&self, i: usize, j: usize, res: (usize, usize)) -> (f64, f64) {
        (
            self.origin_row + (i as f64 + 0.5) * self.size_rows / res.0 as f64,
            self.origin_col + (j as f64 + 0.5) * self.size_cols / res.1 as f64,
        )
    }

    /// Native pixel that nearest-neighbour resampling reads for `(i, j)`.
    pub fn source_pixel(&self, i: usize, j: usize, res: (usize, usize)) -> (usize, usize) {
        let (v, u) = self.pixel_to_native(i, j, res);
        (
            (v.floor().max(0.0) as usize).min(self.native_rows - 1),
            (u.floor().max(0.0) as usize).min(self.native_cols - 1),
        )
    }

    pub fn inside_frame(&self) -> bool {
        let eps = 1e-9;
        self.origin_row >= -eps
            && self.origin_col >= -eps
            && self.origin_row + self.size_rows <= self.native_rows as f64 + eps
            && self.origin_col + self.size_cols <= self.native_cols as f64 + eps
    }

    pub fn contains(&self, inner: &CropWindow) -> bool {
        let eps = 1e-9;
        inner.origin_row >= self.origin_row - eps
            && inner.origin_col >= self.origin_col - eps
            && inner.origin_row + inner.size_rows <= self.origin_row + self.size_rows + eps
            && inner.origin_col + inner.size_cols <= self.origin_col + self.size_cols + eps
    }

    /// Window of side `composed_scale * new_scale` of the native frame,
    /// centered on pixel `center` of the current `res`-sized image and
    /// shifted, if needed, to stay inside the current window.
    pub fn zoom(&self, center: (usize, usize), res: (usize, usize), new_scale: f64) -> CropWindow {
        let composed = self.composed_scale * new_scale;
        let size_rows = composed * self.native_rows as f64;
        let size_cols = composed * self.native_cols as f64;
        let (cv, cu) = self.pixel_to_native(center.0, center.1, res);
        let clamp = |o: f64, lo: f64, span: f64, size: f64| o.max(lo).min(lo + (span - size).max(0.0));
        CropWindow {
            origin_row: clamp(cv - size_rows / 2.0, self.origin_row, self.size_rows, size_rows),
            origin_col: clamp(cu - size_cols / 2.0, self.origin_col, self.size_cols, size_cols),
            size_rows,
            size_cols,
            composed_scale: composed,
            native_rows: self.native_rows,
            native_cols: self.native_cols,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "origin_row={:?}", self.origin_row);
        let _ = writeln!(s, "origin_col={:?}", self.origin_col);
        let _ = writeln!(s, "size_rows={:?}", self.size_rows);
        let _ = writeln!(s, "size_cols={:?}", self.size_cols);
        let _ = writeln!(s, "composed_scale={:?}", self.composed_scale);
        let _ = writeln!(s, "native_rows={}", self.native_rows);
        let _ = writeln!(s, "native_cols={}", self.native_cols);
        s
    }
}

/// Row-major metric depth grid together with the window it images.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub window: CropWindow,
}

impl DepthImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn res(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Millimeter-quantized grid.
    pub fn to_mm(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        // FNV-1a over the bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn table_hit(origin: &Vec3, dir: &Vec3) -> Option<f64> {
    (dir.z < 0.0).then(|| -origin.z / dir.z).filter(|t| *t > 0.0)
}

/// Depth of the nearest surface (primitive or table) along the ray through
/// native pixel `(row, col)`, capped at the far clip.
pub fn ray_depth(scene: &Scene, cam: &CameraModel, row: usize, col: usize) -> f64 {
    let (o, d) = cam.ray(row as f64, col as f64);
    let mut best = table_hit(&o, &d).unwrap_or(f64::INFINITY);
    for p in &scene.primitives {
        if let Some(t) = p.ray_hit(&o, &d) {
            best = best.min(t);
        }
    }
    best.min(cam.far_clip)
}

pub fn render_depth(scene: &Scene, cam: &CameraModel) -> DepthImage {
    let mut data = Vec::with_capacity(cam.rows * cam.cols);
    for r in 0..cam.rows {
        for c in 0..cam.cols {
            data.push(ray_depth(scene, cam, r, c));
        }
    }
    DepthImage {
        rows: cam.rows,
        cols: cam.cols,
        data,
        window: cam.full_window(),
    }
}

/// Nearest-neighbour resampling of `window` from the native image.
pub fn resample(native: &DepthImage, window: &CropWindow, out_res: (usize, usize)) -> DepthImage {
    let mut data = Vec::with_capacity(out_res.0 * out_res.1);
    for i in 0..out_res.0 {
        for j in 0..out_res.1 {
            let (r, c) = window.source_pixel(i, j, out_res);
            data.push(native.at(r, c));
        }
    }
    DepthImage {
        rows: out_res.0,
        cols: out_res.1,
        data,
        window: *window,
    }
}

/// Crops the native image around `center` (pixel of `current`'s image) at
/// `new_scale` of the current window and resizes to `out_res`.
pub fn crop_resize(
    native: &DepthImage,
    current: &DepthImage,
    center: (usize, usize),
    new_scale: f64,
    out_res: (usize, usize),
) -> DepthImage {
    let window = current.window.zoom(center, current.res(), new_scale);
    resample(native, &window, out_res)
}

/// World point seen at pixel `(i, j)` of a `res`-sized image of `window`,
/// deprojected through the native pixel the image samples.
pub fn deproject(
    pixel: (usize, usize),
    depth: f64,
    cam: &CameraModel,
    window: &CropWindow,
    res: (usize, usize),
) -> Result<Vec3> {
    if pixel.0 >= res.0 || pixel.1 >= res.1 {
        return Err(Error::OutOfWindow {
            row: pixel.0,
            col: pixel.1,
            rows: res.0,
            cols: res.1,
        });
    }
    let (r, c) = window.source_pixel(pixel.0, pixel.1, res);
    Ok(deproject_native(r as f64, c as f64, depth, cam))
}

pub fn deproject_native(row: f64, col: f64, depth: f64, cam: &CameraModel) -> Vec3 {
    let p_cam = Vector3::new((col - cam.cx) * depth / cam.fx, (row - cam.cy) * depth / cam.fy, depth);
    cam.camera_to_world(&p_cam)
}

pub fn write_pgm16(path: &Path, rows: usize, cols: usize, pixels: &[u16]) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{cols} {rows}\n65535\n")?;
    for v in pixels {
        f.write_all(&v.to_be_bytes())?;
    }
    f.flush()
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated pgm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Parse("expected 16-bit P5 pgm".into()));
    }
    let cols: usize = fields[1].parse().map_err(|_| Error::Parse("pgm width".into()))?;
    let rows: usize = fields[2].parse().map_err(|_| Error::Parse("pgm height".into()))?;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != rows * cols * 2 {
        return Err(Error::Parse("pgm body size".into()));
    }
    let px = body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((rows, cols, px))
}

/// Draws the outline of `window` into a native-resolution buffer.
pub fn draw_window(pixels: &mut [u16], rows: usize, cols: usize, window: &CropWindow, value: u16) {
    let r0 = window.origin_row.floor().max(0.0) as usize;
    let c0 = window.origin_col.floor().max(0.0) as usize;
    let r1 = ((window.origin_row + window.size_rows).ceil() as usize).clamp(1, rows) - 1;
    let c1 = ((window.origin_col + window.size_cols).ceil() as usize).clamp(1, cols) - 1;
    for c in c0..=c1 {
        pixels[r0 * cols + c] = value;
        pixels[r1 * cols + c] = value;
    }
    for r in r0..=r1 {
        pixels[r * cols + c0] = value;
        pixels[r * cols + c1] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Primitive, Shape};

    fn odd_camera() -> CameraModel {
        CameraModel::looking_at_table(120.0, 65, 65, 0.6, 0.0, 2.0)
    }

    #[test]
    fn empty_scene_is_flat() {
        let cam = CameraModel::from_config(&CameraConfig::default()).unwrap();
        let img = render_depth(&Scene::empty(0.25), &cam);
        assert!(img.data.iter().all(|d| (d - 0.6).abs() < 1e-12));
    }

    fn sphere_at(z: f64) -> Scene {
        Scene::with_primitives(
            vec![Primitive {
                id: 0,
                shape: Shape::Sphere { radius: 0.03 },
                position: Vector3::new(0.0, 0.0, z),
                yaw: 0.0,
            }],
            0.25,
        )
    }

    #[test]
    fn sphere_center_pixel() {
        let cam = odd_camera();
        // Centered on the table plane: depth is h - r.
        let img = render_depth(&sphere_at(0.0), &cam);
        assert!((img.at(32, 32) - 0.57).abs() < 1e-12);
        // Resting on the table: depth is h - 2r.
        let img = render_depth(&sphere_at(0.03), &cam);
        assert!((img.at(32, 32) - 0.54).abs() < 1e-12);
    }

    #[test]
    fn tilted_camera_sees_table() {
        let cfg = CameraConfig {
            tilt_deg: 60.0,
            ..CameraConfig::default()
        };
        let cam = CameraModel::from_config(&cfg).unwrap();
        let img = render_depth(&Scene::empty(0.25), &cam);
        let center = img.at(64, 64);
        assert!((center - 0.6).abs() < 0.01, "{center}");
        assert!(img.data.iter().all(|d| d.is_finite() && *d > 0.0));
    }

    #[test]
    fn principal_point_deprojects_on_axis() {
        let cam = CameraModel::looking_at_table(100.0, 65, 65, 0.6, 0.0, 2.0);
        let p = deproject_native(32.0, 32.0, 0.4, &cam);
        let c = cam.world_to_camera(&p);
        assert!(c.x.abs() < 1e-15 && c.y.abs() < 1e-15 && (c.z - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identity_crop_keeps_window() {
        let w = CropWindow::full(128, 128);
        let z = w.zoom((32, 32), (64, 64), 1.0);
        assert_eq!(z, w);
    }

    #[test]
    fn successive_half_crops_compose() {
        let w = CropWindow::full(128, 128);
        let z = w.zoom((10, 50), (64, 64), 0.5).zoom((40, 3), (64, 64), 0.5);
        assert_eq!(z.composed_scale, 0.25);
        assert_eq!(z.size_rows, 32.0);
    }

    #[test]
    fn corner_crop_clamps_inward() {
        let w = CropWindow::full(128, 128);
        // Pixel (0, 63) of a 64x64 image centers at native (1.0, 127.0).
        let z = w.zoom((0, 63), (64, 64), 0.5);
        assert_eq!(z.origin_row, 0.0);
        assert_eq!(z.origin_col, 64.0);
        assert_eq!(z.size_rows, 64.0);
        assert!(z.inside_frame());
        assert_eq!(z.composed_scale, 0.5);
    }

    #[test]
    fn out_of_window_pixel_is_error() {
        let cam = odd_camera();
        let w = cam.full_window();
        assert!(matches!(
            deproject((64, 10), 0.5, &cam, &w, (64, 64)),
            Err(Error::OutOfWindow { .. })
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let px: Vec<u16> = (0..12).map(|v| v * 5000).collect();
        write_pgm16(&path, 3, 4, &px).unwrap();
        let (r, c, back) = read_pgm16(&path).unwrap();
        assert_eq!((r, c), (3, 4));
        assert_eq!(back, px);
    }
}
