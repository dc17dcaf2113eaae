//! Pinhole camera model and map-element rasterization.
//!
//! Camera frame convention: z forward, x right, y down. World up is +z.
//! Poses are world-from-camera.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::error::{Error, Result};
use crate::map::{ElementKind, MapElement};

const UNIT_TOL: f64 = 1e-6;
const MIN_DEPTH: f64 = 1e-9;

/// Value written into raster channels where an element covers a pixel.
pub const RASTER_FILL: u8 = 255;

/// Pinhole intrinsics and image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("fx and fy must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("image size must be at least 1x1"));
        }
        Ok(())
    }
}

/// World-from-camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Build a pose at `position` with the optical axis along `forward`,
    /// keeping the image upright with respect to world `up`.
    pub fn looking(position: Vector3<f64>, forward: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = forward
            .try_normalize(1e-12)
            .ok_or_else(|| Error::geometry("zero forward direction"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::geometry("forward parallel to up"))?;
        let y = z.cross(&x);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            x, y, z,
        ]));
        Ok(Pose {
            position,
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
        })
    }

    /// Optical-axis direction in the world frame.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    /// Construct from raw parts, validating quaternion normalization.
    pub fn from_parts(position: [f64; 3], quat_wxyz: [f64; 4]) -> Result<Self> {
        let q = Quaternion::new(quat_wxyz[0], quat_wxyz[1], quat_wxyz[2], quat_wxyz[3]);
        if (q.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "pose quaternion must be unit length (got {})",
                q.norm()
            )));
        }
        Ok(Pose {
            position: Vector3::from(position),
            rotation: UnitQuaternion::from_quaternion(q),
        })
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// A camera image with its pose and intrinsics.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    /// RGB bytes, layout `[3, H, W]`.
    pub image: Array3<u8>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub clip_id: String,
    pub frame_idx: u32,
}

impl CameraFrame {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (c, h, w) = self.image.dim();
        if c != 3 || h != self.intrinsics.height as usize || w != self.intrinsics.width as usize {
            return Err(Error::shape(format!(
                "image dims [{c},{h},{w}] do not match intrinsics {}x{}",
                self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ok(())
    }

    /// Stable identifier used for file naming.
    pub fn frame_id(&self) -> String {
        format!("{}_{:06}", self.clip_id, self.frame_idx)
    }
}

/// Rasterized map channels, one channel per element kind, values 0 or
/// [`RASTER_FILL`]. Layout `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub pixels: Array3<u8>,
    pub kinds: Vec<ElementKind>,
}

impl RasterImage {
    pub fn zeros(kinds: &[ElementKind], width: u32, height: u32) -> Self {
        RasterImage {
            pixels: Array3::zeros((kinds.len(), height as usize, width as usize)),
            kinds: kinds.to_vec(),
        }
    }

    pub fn channel_of(&self, kind: ElementKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }
}

/// Project a world point. Returns pixel coordinates and the camera-frame
/// depth; the depth may be non-positive (callers cull).
pub fn project(p: &Vector3<f64>, pose: &Pose, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    let cam = pose.rotation.inverse() * (p - pose.position);
    if cam.z.abs() < MIN_DEPTH {
        return Err(Error::geometry(format!(
            "projection degenerate: |z| = {} < {MIN_DEPTH}",
            cam.z.abs()
        )));
    }
    let u = k.fx * cam.x / cam.z + k.cx;
    let v = k.fy * cam.y / cam.z + k.cy;
    Ok((u, v, cam.z))
}

/// Invert [`project`]: lift pixel `(u, v)` at depth `d` back to the world.
pub fn back_project(u: f64, v: f64, d: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::geometry(format!("back_project requires depth > 0 (got {d})")));
    }
    let cam = Vector3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
    Ok(pose.rotation * cam + pose.position)
}

/// The four corners of an element's upright rectangle: width along the
/// horizontal axis orthogonal to the normal, height along world up, in loop
/// order.
pub fn element_corners(e: &MapElement) -> Result<[Vector3<f64>; 4]> {
    let up = Vector3::z();
    let right = up
        .cross(&e.normal)
        .try_normalize(1e-9)
        .ok_or_else(|| Error::geometry(format!("element {}: normal parallel to world up", e.id)))?;
    let rw = right * (0.5 * e.width);
    let uh = up * (0.5 * e.height);
    Ok([
        e.center - rw - uh,
        e.center + rw - uh,
        e.center + rw + uh,
        e.center - rw + uh,
    ])
}

/// A convex quad in pixel coordinates with a fixed fill rule.
///
/// Coverage is decided at pixel centers; a center exactly on an edge counts
/// as inside only for top and left edges, so abutting quads never claim the
/// same pixel twice.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedQuad {
    pts: [[f64; 2]; 4],
}

impl ProjectedQuad {
    /// Normalizes winding so that interior points have non-negative edge
    /// functions.
    pub fn new(mut pts: [[f64; 2]; 4]) -> Self {
        let mut area2 = 0.0;
        for i in 0..4 {
            let a = pts[i];
            let b = pts[(i + 1) % 4];
            area2 += a[0] * b[1] - b[0] * a[1];
        }
        if area2 < 0.0 {
            pts.reverse();
        }
        ProjectedQuad { pts }
    }

    pub fn points(&self) -> &[[f64; 2]; 4] {
        &self.pts
    }

    /// Axis-aligned bounds (x_min, y_min, x_max, y_max).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.pts.iter().map(|p| p[0]);
        let ys = self.pts.iter().map(|p| p[1]);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }

    /// Whether the center of pixel `(px, py)` is covered.
    pub fn covers(&self, px: u32, py: u32) -> bool {
        let x = px as f64 + 0.5;
        let y = py as f64 + 0.5;
        for i in 0..4 {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % 4];
            let e = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
            if e < 0.0 {
                return false;
            }
            if e == 0.0 {
                let dx = b[0] - a[0];
                let dy = b[1] - a[1];
                let top = dy == 0.0 && dx > 0.0;
                let left = dy < 0.0;
                if !(top || left) {
                    return false;
                }
            }
        }
        true
    }
}

/// One projected element: its quad, clipped bounding box, and kind.
#[derive(Debug, Clone)]
pub struct ProjectedElement {
    pub element_id: String,
    pub kind: ElementKind,
    pub quad: ProjectedQuad,
    /// Bounding box of the projected quad, clipped to the image.
    pub bbox: BoxPx,
}

/// Project an element's rectangle into the image. Returns `None` when any
/// corner is at non-positive depth or the quad misses the image; otherwise
/// the quad plus its image-clipped bounding box.
pub fn project_element_quad(
    e: &MapElement,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<Option<(ProjectedQuad, BoxPx)>> {
    let corners = element_corners(e)?;
    let mut pts = [[0.0f64; 2]; 4];
    for (i, c) in corners.iter().enumerate() {
        let cam = pose.rotation.inverse() * (c - pose.position);
        if cam.z <= MIN_DEPTH {
            return Ok(None);
        }
        pts[i] = [k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy];
    }
    let quad = ProjectedQuad::new(pts);
    let (x_min, y_min, x_max, y_max) = quad.bounds();
    let cx1 = x_min.max(0.0);
    let cy1 = y_min.max(0.0);
    let cx2 = x_max.min(k.width as f64);
    let cy2 = y_max.min(k.height as f64);
    if !(cx2 > cx1 && cy2 > cy1) {
        return Ok(None);
    }
    Ok(Some((quad, BoxPx::from_corners(cx1, cy1, cx2, cy2))))
}

/// Iterate the image pixels a quad may cover, calling `f(px, py)` for each
/// covered pixel center.
pub fn for_each_covered_pixel(quad: &ProjectedQuad, k: &Intrinsics, mut f: impl FnMut(u32, u32)) {
    let (x_min, y_min, x_max, y_max) = quad.bounds();
    let px_lo = (x_min.floor() as i64 - 1).max(0) as u32;
    let px_hi = ((x_max.ceil() as i64 + 1).min(k.width as i64 - 1)).max(0) as u32;
    let py_lo = (y_min.floor() as i64 - 1).max(0) as u32;
    let py_hi = ((y_max.ceil() as i64 + 1).min(k.height as i64 - 1)).max(0) as u32;
    for py in py_lo..=py_hi {
        for px in px_lo..=px_hi {
            if quad.covers(px, py) {
                f(px, py);
            }
        }
    }
}

/// Rasterize elements into the camera view.
///
/// Elements are skipped (absent from the returned list) when any corner has
/// non-positive depth or when the projected quad misses the image entirely.
/// `kinds` fixes the channel palette so renders of different element subsets
/// stay comparable.
pub fn rasterize(
    elements: &[&MapElement],
    pose: &Pose,
    k: &Intrinsics,
    kinds: &[ElementKind],
) -> Result<(RasterImage, Vec<ProjectedElement>)> {
    k.validate()?;
    let mut raster = RasterImage::zeros(kinds, k.width, k.height);
    let mut projected = Vec::new();
    for e in elements {
        let Some(chan) = raster.channel_of(e.kind) else {
            return Err(Error::contract(format!(
                "element {} has kind {:?} not in the raster palette",
                e.id, e.kind
            )));
        };
        let Some((quad, bbox)) = project_element_quad(e, pose, k)? else {
            continue;
        };
        for_each_covered_pixel(&quad, k, |px, py| {
            raster.pixels[(chan, py as usize, px as usize)] = RASTER_FILL;
        });
        projected.push(ProjectedElement {
            element_id: e.id.clone(),
            kind: e.kind,
            quad,
            bbox,
        });
    }
    Ok((raster, projected))
}

// ---------------------------------------------------------------------------
// PNG I/O

/// Write a raster as PNG: grayscale for one channel, RGB for up to three.
pub fn save_raster_png(raster: &RasterImage, path: &Path) -> Result<()> {
    let (c, h, w) = raster.pixels.dim();
    if c == 1 {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([raster.pixels[(0, y, x)]]));
            }
        }
        img.save(path)?;
    } else if c <= 3 {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0u8; 3];
                for ch in 0..c {
                    rgb[ch] = raster.pixels[(ch, y, x)];
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            }
        }
        img.save(path)?;
    } else {
        return Err(Error::shape(format!("cannot encode {c}-channel raster as PNG")));
    }
    Ok(())
}

/// Read a raster PNG back into the given kind palette.
pub fn load_raster_png(path: &Path, kinds: &[ElementKind]) -> Result<RasterImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::zeros((kinds.len(), h, w));
    match kinds.len() {
        1 => {
            let gray = img.to_luma8();
            for y in 0..h {
                for x in 0..w {
                    pixels[(0, y, x)] = gray.get_pixel(x as u32, y as u32)[0];
                }
            }
        }
        c if c <= 3 => {
            let rgb = img.to_rgb8();
            for y in 0..h {
                for x in 0..w {
                    let p = rgb.get_pixel(x as u32, y as u32);
                    for ch in 0..c {
                        pixels[(ch, y, x)] = p[ch];
                    }
                }
            }
        }
        c => return Err(Error::shape(format!("cannot decode {c}-channel raster"))),
    }
    Ok(RasterImage {
        pixels,
        kinds: kinds.to_vec(),
    })
}

pub fn save_image_png(image_chw: &Array3<u8>, path: &Path) -> Result<()> {
    let (c, h, w) = image_chw.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    image_chw[(0, y, x)],
                    image_chw[(1, y, x)],
                    image_chw[(2, y, x)],
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[(c, y, x)] = p[c];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frames manifest (JSON lines)

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub position: [f64; 3],
    /// Unit quaternion, (w, x, y, z).
    pub quaternion: [f64; 4],
}

/// One line of the frames manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub image_path: String,
    pub pose: PoseRecord,
    pub intrinsics: Intrinsics,
    pub clip_id: String,
    pub frame_idx: u32,
}

impl FrameRecord {
    pub fn pose(&self) -> Result<Pose> {
        Pose::from_parts(self.pose.position, self.pose.quaternion)
    }

    pub fn from_frame(frame: &CameraFrame, image_path: impl Into<String>) -> Self {
        FrameRecord {
            image_path: image_path.into(),
            pose: PoseRecord {
                position: [frame.pose.position.x, frame.pose.position.y, frame.pose.position.z],
                quaternion: frame.pose.quat_wxyz(),
            },
            intrinsics: frame.intrinsics,
            clip_id: frame.clip_id.clone(),
            frame_idx: frame.frame_idx,
        }
    }

    pub fn frame_id(&self) -> String {
        format!("{}_{:06}", self.clip_id, self.frame_idx)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(format!("{path:?} line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}
