//! Labeled change-detection data synthesis.
//!
//! SICD frames assign each visible element a category in
//! {`correct`, `to_add`} (a `to_add` element is erased from the map branch to
//! simulate a map-missing object) and optionally place one synthetic `to_del`
//! box in the prior region. VSCD clips run the same assignment at a keyframe,
//! lift the labels to 3D, and propagate them to every frame of the clip by
//! reprojection.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::camera::{
    back_project, for_each_covered_pixel, project, project_element_quad, rasterize, Intrinsics,
    Pose, RasterImage, RASTER_FILL,
};
use crate::error::{Error, Result};
use crate::map::{ElementKind, MapElement};

/// Change status of a detected or synthesized box. `be_corrected` in older
/// dataset exports is an alias of `correct`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChangeCategory {
    #[serde(rename = "correct", alias = "be_corrected")]
    Correct,
    #[serde(rename = "to_del")]
    ToDel,
    #[serde(rename = "to_add")]
    ToAdd,
}

impl ChangeCategory {
    pub const ALL: [ChangeCategory; 3] = [
        ChangeCategory::Correct,
        ChangeCategory::ToDel,
        ChangeCategory::ToAdd,
    ];

    /// Class index used by the detection head (order: correct, to_del, to_add).
    pub fn index(&self) -> usize {
        match self {
            ChangeCategory::Correct => 0,
            ChangeCategory::ToDel => 1,
            ChangeCategory::ToAdd => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ChangeCategory> {
        ChangeCategory::ALL.get(i).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChangeCategory::Correct => "correct",
            ChangeCategory::ToDel => "to_del",
            ChangeCategory::ToAdd => "to_add",
        }
    }
}

/// A labeled 2D box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeBox {
    #[serde(flatten)]
    pub geom: BoxPx,
    pub category: ChangeCategory,
    pub element_id: Option<String>,
}

/// Per-frame label file payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame: String,
    pub boxes: Vec<ChangeBox>,
}

/// A 3D lifted label used for VSCD propagation.
#[derive(Debug, Clone)]
pub struct Label3d {
    pub world_center: Vector3<f64>,
    pub category: ChangeCategory,
    /// Physical size, meters.
    pub width: f64,
    pub height: f64,
    pub element_id: Option<String>,
}

/// Where synthetic `to_del` boxes may be placed: the thresholded accumulation
/// of real box coverage over a training set, plus the dataset-wide average
/// box geometry used as a fallback when an image has no lights of its own.
#[derive(Debug, Clone)]
pub struct PriorRegion {
    pub mask: Array2<bool>,
    pub threshold: u32,
    pub mean_aspect: f64,
    pub mean_height: f64,
}

impl PriorRegion {
    pub fn num_candidates(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Pixel-center containment with half-open edges, shared by the prior
/// accumulation and the candidate-area subtraction.
fn box_covers_pixel(b: &BoxPx, px: usize, py: usize) -> bool {
    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    x >= b.x1() && x < b.x2() && y >= b.y1() && y < b.y2()
}

/// Accumulate per-pixel coverage counts of the training boxes and binarize at
/// `threshold` co-occurrences.
pub fn build_prior_region(
    label_sets: &[Vec<BoxPx>],
    image_size: (u32, u32),
    threshold: u32,
) -> Result<PriorRegion> {
    if threshold < 1 {
        return Err(Error::contract("prior threshold must be at least 1"));
    }
    let total_boxes: usize = label_sets.iter().map(|s| s.len()).sum();
    if label_sets.is_empty() || total_boxes == 0 {
        return Err(Error::contract(
            "prior region undefined for an empty training set",
        ));
    }
    let (w, h) = (image_size.0 as usize, image_size.1 as usize);
    let mut counts: Array2<u32> = Array2::zeros((h, w));
    let mut aspect_sum = 0.0;
    let mut height_sum = 0.0;
    for set in label_sets {
        for b in set {
            aspect_sum += b.w / b.h;
            height_sum += b.h;
            let x_lo = b.x1().floor().max(0.0) as usize;
            let x_hi = (b.x2().ceil().max(0.0) as usize).min(w);
            let y_lo = b.y1().floor().max(0.0) as usize;
            let y_hi = (b.y2().ceil().max(0.0) as usize).min(h);
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    if box_covers_pixel(b, px, py) {
                        counts[(py, px)] += 1;
                    }
                }
            }
        }
    }
    Ok(PriorRegion {
        mask: counts.mapv(|c| c >= threshold),
        threshold,
        mean_aspect: aspect_sum / total_boxes as f64,
        mean_height: height_sum / total_boxes as f64,
    })
}

/// Draw a `to_del` seed in the prior region minus the existing light boxes.
///
/// The seed is one uniform draw; `None` when the candidate area is empty or
/// the sized box would overlap an existing light box (inflated by `margin`
/// pixels so reprojected boxes keep IoU zero).
pub fn place_to_del(
    prior: &PriorRegion,
    existing: &[BoxPx],
    rng: &mut ChaCha8Rng,
    margin: f64,
) -> Option<ChangeBox> {
    let (h, w) = prior.mask.dim();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            if prior.mask[(py, px)] && !existing.iter().any(|b| box_covers_pixel(b, px, py)) {
                candidates.push((px, py));
            }
        }
    }
    if candidates.is_empty() {
        return None;
    }
    let (px, py) = candidates[rng.gen_range(0..candidates.len())];

    // Aspect ratio and height from this image's lights, falling back to the
    // dataset-wide averages when the image has none.
    let (aspect, height) = if existing.is_empty() {
        (prior.mean_aspect, prior.mean_height)
    } else {
        let n = existing.len() as f64;
        (
            existing.iter().map(|b| b.w / b.h).sum::<f64>() / n,
            existing.iter().map(|b| b.h).sum::<f64>() / n,
        )
    };
    let geom = BoxPx::new(px as f64 + 0.5, py as f64 + 0.5, aspect * height, height);
    if existing.iter().any(|b| b.inflated(margin).overlaps(&geom)) {
        return None;
    }
    Some(ChangeBox {
        geom,
        category: ChangeCategory::ToDel,
        element_id: None,
    })
}

/// Mean camera-frame depth of the `to_add` and `correct` labels.
pub fn estimate_depth_for_del(labels: &[(ChangeBox, f64)]) -> Result<f64> {
    let depths: Vec<f64> = labels
        .iter()
        .filter(|(b, _)| matches!(b.category, ChangeCategory::ToAdd | ChangeCategory::Correct))
        .map(|(_, d)| *d)
        .collect();
    if depths.is_empty() {
        return Err(Error::contract(
            "to_del depth estimation needs at least one to_add or correct label",
        ));
    }
    Ok(depths.iter().sum::<f64>() / depths.len() as f64)
}

/// Generation knobs shared by SICD and VSCD synthesis.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    /// Probability of attempting one `to_del` placement per frame/clip.
    pub p_del: f64,
    /// Safety margin (pixels) between a `to_del` box and real light boxes.
    pub margin_px: f64,
    /// Constrain a clip to at most one change event (for clip-level
    /// classification datasets).
    pub single_event: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            p_del: 0.5,
            margin_px: 2.0,
            single_event: false,
        }
    }
}

/// Result of synthesizing one SICD frame: the assignment-consistent raster
/// (the map-branch network input) and the labeled boxes.
#[derive(Debug, Clone)]
pub struct SicdFrame {
    pub raster: RasterImage,
    pub labels: Vec<ChangeBox>,
    /// Ids of elements erased from the raster (`to_add` assignment).
    pub removed: Vec<String>,
}

/// Channel a synthetic `to_del` rectangle is drawn into.
fn to_del_channel(kinds: &[ElementKind]) -> usize {
    kinds
        .iter()
        .position(|k| *k == ElementKind::TrafficSignal)
        .unwrap_or(0)
}

fn draw_box_into_raster(raster: &mut RasterImage, b: &BoxPx, chan: usize) {
    let (_, h, w) = raster.pixels.dim();
    let x_lo = b.x1().floor().max(0.0) as usize;
    let x_hi = (b.x2().ceil().max(0.0) as usize).min(w);
    let y_lo = b.y1().floor().max(0.0) as usize;
    let y_hi = (b.y2().ceil().max(0.0) as usize).min(h);
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            if box_covers_pixel(b, px, py) {
                raster.pixels[(chan, py, px)] = RASTER_FILL;
            }
        }
    }
}

/// Assign categories to the visible elements and produce the re-rendered
/// raster plus labels for a single frame.
///
/// Every visible element is independently assigned `correct` or `to_add`
/// (uniform over all assignments); with probability `p_del` one synthetic
/// `to_del` box is placed in the prior region. Fixed seeds give identical
/// output.
pub fn synthesize_sicd_frame(
    visible: &[&MapElement],
    pose: &Pose,
    k: &Intrinsics,
    kinds: &[ElementKind],
    prior: &PriorRegion,
    params: &SynthParams,
    seed: u64,
) -> Result<SicdFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, projected) = rasterize(visible, pose, k, kinds)?;

    let mut labels = Vec::new();
    let mut removed = Vec::new();
    for p in &projected {
        let to_add = rng.gen_bool(0.5);
        let category = if to_add {
            removed.push(p.element_id.clone());
            ChangeCategory::ToAdd
        } else {
            ChangeCategory::Correct
        };
        labels.push(ChangeBox {
            geom: p.bbox,
            category,
            element_id: Some(p.element_id.clone()),
        });
    }

    let kept: Vec<&MapElement> = visible
        .iter()
        .copied()
        .filter(|e| !removed.contains(&e.id))
        .collect();
    let (mut raster, _) = rasterize(&kept, pose, k, kinds)?;

    if rng.gen_bool(params.p_del) {
        let real_boxes: Vec<BoxPx> = projected.iter().map(|p| p.bbox).collect();
        if let Some(dele) = place_to_del(prior, &real_boxes, &mut rng, params.margin_px) {
            draw_box_into_raster(&mut raster, &dele.geom, to_del_channel(kinds));
            labels.push(dele);
        }
    }

    Ok(SicdFrame {
        raster,
        labels,
        removed,
    })
}

/// One output frame of a synthesized clip.
#[derive(Debug, Clone)]
pub struct VscdFrame {
    pub frame_idx: usize,
    pub raster: RasterImage,
    pub labels: Vec<ChangeBox>,
}

/// A synthesized clip with its dominant event category.
#[derive(Debug, Clone)]
pub struct VscdClip {
    pub frames: Vec<VscdFrame>,
    /// The clip-level event: `to_add`/`to_del` when such an event was
    /// synthesized, `correct` otherwise.
    pub category: ChangeCategory,
    pub labels_3d: Vec<Label3d>,
    /// Ids of elements erased from every raster of the clip.
    pub removed: Vec<String>,
}

/// Synthesize a video clip: keyframe assignment, 3D lifting, and propagation
/// of every label into every frame where it stays in view.
pub fn synthesize_vscd_clip(
    map_elements: &[MapElement],
    poses: &[Pose],
    k: &Intrinsics,
    kinds: &[ElementKind],
    roi: &crate::map::RoiConfig,
    prior: &PriorRegion,
    params: &SynthParams,
    seed: u64,
) -> Result<VscdClip> {
    if poses.is_empty() {
        return Err(Error::contract("a clip needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key_idx = poses.len() / 2;

    // Per-frame ROI visibility; assignment domain = union over frames.
    let mut per_frame_visible: Vec<Vec<&MapElement>> = Vec::with_capacity(poses.len());
    for pose in poses {
        let fwd = pose.forward();
        let mut vis: Vec<&MapElement> = map_elements
            .iter()
            .filter(|e| {
                let dist = (pose.position - e.center).norm();
                let cos = fwd.dot(&e.normal);
                dist < roi.tau_dis_m && cos < roi.tau_ori_cos
            })
            .collect();
        vis.sort_by(|a, b| a.id.cmp(&b.id));
        per_frame_visible.push(vis);
    }
    let mut union_ids: Vec<String> = per_frame_visible
        .iter()
        .flat_map(|v| v.iter().map(|e| e.id.clone()))
        .collect();
    union_ids.sort();
    union_ids.dedup();

    // Category assignment over the union of visible elements.
    let mut removed: Vec<String> = Vec::new();
    let mut want_to_del = false;
    let mut category = ChangeCategory::Correct;
    if params.single_event {
        match rng.gen_range(0..3u32) {
            0 => {}
            1 => {
                if !union_ids.is_empty() {
                    let pick = rng.gen_range(0..union_ids.len());
                    removed.push(union_ids[pick].clone());
                    category = ChangeCategory::ToAdd;
                }
            }
            _ => want_to_del = true,
        }
    } else {
        for id in &union_ids {
            if rng.gen_bool(0.5) {
                removed.push(id.clone());
            }
        }
        if !removed.is_empty() {
            category = ChangeCategory::ToAdd;
        }
        want_to_del = rng.gen_bool(params.p_del);
    }

    let category_of = |id: &str| {
        if removed.iter().any(|r| r == id) {
            ChangeCategory::ToAdd
        } else {
            ChangeCategory::Correct
        }
    };

    // Lift element labels to 3D (the 2D-3D correspondence is known).
    let mut labels_3d: Vec<Label3d> = union_ids
        .iter()
        .map(|id| {
            let e = map_elements.iter().find(|e| &e.id == id).unwrap();
            Label3d {
                world_center: e.center,
                category: category_of(id),
                width: e.width,
                height: e.height,
                element_id: Some(id.clone()),
            }
        })
        .collect();

    // Synthesize the to_del event at the keyframe and back-project it.
    let key_pose = &poses[key_idx];
    let mut to_del_element: Option<MapElement> = None;
    if want_to_del {
        let key_visible = &per_frame_visible[key_idx];
        let (_, key_projected) = rasterize(key_visible, key_pose, k, kinds)?;
        let depth_labels: Vec<(ChangeBox, f64)> = key_projected
            .iter()
            .filter_map(|p| {
                let e = key_visible.iter().find(|e| e.id == p.element_id)?;
                let (_, _, d) = project(&e.center, key_pose, k).ok()?;
                Some((
                    ChangeBox {
                        geom: p.bbox,
                        category: category_of(&p.element_id),
                        element_id: Some(p.element_id.clone()),
                    },
                    d,
                ))
            })
            .collect();
        if let Ok(depth) = estimate_depth_for_del(&depth_labels) {
            let real_boxes: Vec<BoxPx> = key_projected.iter().map(|p| p.bbox).collect();
            let attempts = if params.single_event { 16 } else { 1 };
            for _ in 0..attempts {
                let Some(seed_box) = place_to_del(prior, &real_boxes, &mut rng, params.margin_px)
                else {
                    continue;
                };
                match lift_to_del(&seed_box.geom, depth, key_pose, k) {
                    Ok(candidate) => {
                        if to_del_valid_in_all_frames(
                            &candidate,
                            &per_frame_visible,
                            poses,
                            k,
                            kinds,
                            prior,
                            params.margin_px,
                        )? {
                            to_del_element = Some(candidate);
                            break;
                        }
                    }
                    Err(_) => continue,
                }
            }
        }
    }
    if let Some(del) = &to_del_element {
        labels_3d.push(Label3d {
            world_center: del.center,
            category: ChangeCategory::ToDel,
            width: del.width,
            height: del.height,
            element_id: None,
        });
        category = ChangeCategory::ToDel;
    } else if want_to_del && params.single_event {
        category = ChangeCategory::Correct;
    }

    // Propagate: per frame, render the map branch (kept elements plus the
    // synthetic to_del) and emit labels for everything still in view.
    let mut frames = Vec::with_capacity(poses.len());
    for (idx, pose) in poses.iter().enumerate() {
        let visible = &per_frame_visible[idx];
        let kept: Vec<&MapElement> = visible
            .iter()
            .copied()
            .filter(|e| !removed.iter().any(|r| r == &e.id))
            .collect();
        let mut raster_elems = kept.clone();
        if let Some(del) = &to_del_element {
            raster_elems.push(del);
        }
        let (raster, _) = rasterize(&raster_elems, pose, k, kinds)?;

        let mut labels = Vec::new();
        for e in visible {
            if let Some((_, bbox)) = project_element_quad(e, pose, k)? {
                labels.push(ChangeBox {
                    geom: bbox,
                    category: category_of(&e.id),
                    element_id: Some(e.id.clone()),
                });
            }
        }
        if let Some(del) = &to_del_element {
            if let Some((_, bbox)) = project_element_quad(del, pose, k)? {
                labels.push(ChangeBox {
                    geom: bbox,
                    category: ChangeCategory::ToDel,
                    element_id: None,
                });
            }
        }
        frames.push(VscdFrame {
            frame_idx: idx,
            raster,
            labels,
        });
    }

    Ok(VscdClip {
        frames,
        category,
        labels_3d,
        removed,
    })
}

/// Back-project a 2D `to_del` seed into a 3D element facing the keyframe
/// camera, sized by the pinhole scale at the estimated depth.
fn lift_to_del(seed: &BoxPx, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<MapElement> {
    let center = back_project(seed.cx, seed.cy, depth, pose, k)?;
    let width = seed.w * depth / k.fx;
    let height = seed.h * depth / k.fy;
    let mut facing = pose.position - center;
    facing.z = 0.0;
    let normal = facing
        .try_normalize(1e-9)
        .ok_or_else(|| Error::geometry("to_del directly above the camera"))?;
    MapElement::new("__to_del__", center, normal, width, height)
}

/// A candidate `to_del` element is accepted only if, in every frame where it
/// projects into the image, it keeps clear of real light boxes and its center
/// stays inside the prior mask.
fn to_del_valid_in_all_frames(
    candidate: &MapElement,
    per_frame_visible: &[Vec<&MapElement>],
    poses: &[Pose],
    k: &Intrinsics,
    kinds: &[ElementKind],
    prior: &PriorRegion,
    margin: f64,
) -> Result<bool> {
    let (mh, mw) = prior.mask.dim();
    for (idx, pose) in poses.iter().enumerate() {
        let Some((_, bbox)) = project_element_quad(candidate, pose, k)? else {
            continue;
        };
        let px = bbox.cx.floor();
        let py = bbox.cy.floor();
        if px < 0.0 || py < 0.0 || px as usize >= mw || py as usize >= mh {
            return Ok(false);
        }
        if !prior.mask[(py as usize, px as usize)] {
            return Ok(false);
        }
        let (_, projected) = rasterize(&per_frame_visible[idx], pose, k, kinds)?;
        if projected
            .iter()
            .any(|p| p.bbox.inflated(margin).overlaps(&bbox))
        {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// World-image rendering
//
// Real sensor imagery is unavailable at desk scale, so the camera branch is
// fed a rendered "world image": a textured background with the world-present
// elements drawn in. A to_add element appears here but not in the raster; a
// to_del element appears in the raster only.

fn hash_noise(x: u32, y: u32, seed: u64) -> u8 {
    let mut h = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((x as u64) << 32) | y as u64);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h & 0x3F) as u8
}

/// Render the camera-branch image: textured background plus every
/// world-present element (correct and to_add, never to_del).
pub fn render_world_image(
    world_elements: &[&MapElement],
    pose: &Pose,
    k: &Intrinsics,
    texture_seed: u64,
) -> Result<Array3<u8>> {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut img = Array3::zeros((3, h, w));
    for py in 0..h {
        let sky = 150u8.saturating_sub((py * 90 / h.max(1)) as u8);
        for px in 0..w {
            let n = hash_noise(px as u32, py as u32, texture_seed);
            img[(0, py, px)] = sky / 2 + n;
            img[(1, py, px)] = sky / 2 + 20 + n;
            img[(2, py, px)] = sky + n;
        }
    }
    for e in world_elements {
        let Some((quad, bbox)) = project_element_quad(e, pose, k)? else {
            continue;
        };
        for_each_covered_pixel(&quad, k, |px, py| {
            img[(0, py as usize, px as usize)] = 30;
            img[(1, py as usize, px as usize)] = 30;
            img[(2, py as usize, px as usize)] = 36;
        });
        // Lamp disc so the element reads as a signal, not a silhouette.
        let r = 0.25 * bbox.w.min(bbox.h);
        let x_lo = (bbox.cx - r).floor().max(0.0) as usize;
        let x_hi = ((bbox.cx + r).ceil().max(0.0) as usize).min(w);
        let y_lo = (bbox.cy - r).floor().max(0.0) as usize;
        let y_hi = ((bbox.cy + r).ceil().max(0.0) as usize).min(h);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let dx = px as f64 + 0.5 - bbox.cx;
                let dy = py as f64 + 0.5 - bbox.cy;
                if dx * dx + dy * dy <= r * r {
                    img[(0, py, px)] = 230;
                    img[(1, py, px)] = 60;
                    img[(2, py, px)] = 40;
                }
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Clip manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub category: ChangeCategory,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipsFile {
    pub clips: Vec<ClipRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::RoiConfig;

    fn small_k() -> Intrinsics {
        Intrinsics {
            fx: 96.0,
            fy: 96.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    fn level_camera(pos: [f64; 3]) -> Pose {
        Pose::looking(Vector3::from(pos), Vector3::new(1.0, 0.0, 0.0), Vector3::z()).unwrap()
    }

    fn signal(id: &str, x: f64, y: f64, z: f64) -> MapElement {
        MapElement::new(id, Vector3::new(x, y, z), Vector3::new(-1.0, 0.0, 0.0), 3.0, 3.0).unwrap()
    }

    fn wide_prior() -> PriorRegion {
        PriorRegion {
            mask: Array2::from_elem((64, 64), true),
            threshold: 1,
            mean_aspect: 1.0,
            mean_height: 8.0,
        }
    }

    #[test]
    fn prior_single_box_threshold_one() {
        let boxes = vec![vec![BoxPx::from_corners(0.0, 0.0, 10.0, 10.0)]];
        let prior = build_prior_region(&boxes, (16, 16), 1).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                assert_eq!(prior.mask[(py, px)], px < 10 && py < 10, "({px},{py})");
            }
        }
    }

    #[test]
    fn prior_disjoint_boxes_threshold_two_is_empty() {
        let boxes = vec![
            vec![BoxPx::from_corners(0.0, 0.0, 4.0, 4.0)],
            vec![BoxPx::from_corners(8.0, 8.0, 12.0, 12.0)],
        ];
        let prior = build_prior_region(&boxes, (16, 16), 2).unwrap();
        assert_eq!(prior.num_candidates(), 0);
    }

    #[test]
    fn prior_matches_per_pixel_counting_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sets = Vec::new();
        for _ in 0..6 {
            let mut set = Vec::new();
            for _ in 0..3 {
                let x1: f64 = rng.gen_range(0.0..20.0);
                let y1: f64 = rng.gen_range(0.0..20.0);
                set.push(BoxPx::from_corners(
                    x1,
                    y1,
                    x1 + rng.gen_range(2.0..12.0),
                    y1 + rng.gen_range(2.0..12.0),
                ));
            }
            sets.push(set);
        }
        let threshold = 3;
        let prior = build_prior_region(&sets, (32, 32), threshold).unwrap();
        for py in 0..32 {
            for px in 0..32 {
                let count = sets
                    .iter()
                    .flatten()
                    .filter(|b| box_covers_pixel(b, px, py))
                    .count() as u32;
                assert_eq!(prior.mask[(py, px)], count >= threshold, "({px},{py})");
            }
        }
    }

    #[test]
    fn prior_requires_nonempty_training_set() {
        assert!(build_prior_region(&[], (8, 8), 1).is_err());
        assert!(build_prior_region(&[vec![]], (8, 8), 1).is_err());
    }

    #[test]
    fn placed_to_del_avoids_lights_and_stays_in_prior() {
        let prior = PriorRegion {
            mask: Array2::from_shape_fn((64, 64), |(y, x)| x >= 40 && y < 30),
            threshold: 1,
            mean_aspect: 1.0,
            mean_height: 6.0,
        };
        let light = BoxPx::from_corners(0.0, 0.0, 20.0, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut placed = 0;
        for _ in 0..50 {
            if let Some(b) = place_to_del(&prior, &[light], &mut rng, 2.0) {
                placed += 1;
                assert_eq!(b.geom.iou(&light), 0.0);
                assert!(prior.mask[(b.geom.cy as usize, b.geom.cx as usize)]);
                assert_eq!(b.category, ChangeCategory::ToDel);
            }
        }
        assert!(placed > 0, "expected at least one successful placement");
    }

    #[test]
    fn place_to_del_empty_candidate_area_returns_none() {
        let prior = PriorRegion {
            mask: Array2::from_elem((16, 16), false),
            threshold: 1,
            mean_aspect: 0.5,
            mean_height: 4.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(place_to_del(&prior, &[], &mut rng, 2.0).is_none());
    }

    #[test]
    fn to_del_size_is_mean_of_image_lights() {
        // Lights of heights 20 and 40, both aspect 0.5 -> h = 30, w = 15.
        let prior = PriorRegion {
            mask: Array2::from_shape_fn((100, 100), |(y, x)| x >= 60 && y >= 60),
            threshold: 1,
            mean_aspect: 2.0,
            mean_height: 99.0,
        };
        let lights = vec![
            BoxPx::new(10.0, 10.0, 10.0, 20.0),
            BoxPx::new(30.0, 10.0, 20.0, 40.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = place_to_del(&prior, &lights, &mut rng, 2.0).expect("placement");
        assert!((b.geom.h - 30.0).abs() < 1e-12);
        assert!((b.geom.w - 15.0).abs() < 1e-12);
    }

    #[test]
    fn depth_estimate_is_arithmetic_mean() {
        let mk = |cat, d| {
            (
                ChangeBox {
                    geom: BoxPx::new(0.0, 0.0, 1.0, 1.0),
                    category: cat,
                    element_id: None,
                },
                d,
            )
        };
        assert_eq!(
            estimate_depth_for_del(&[
                mk(ChangeCategory::Correct, 18.0),
                mk(ChangeCategory::ToAdd, 22.0)
            ])
            .unwrap(),
            20.0
        );
        assert_eq!(
            estimate_depth_for_del(&[mk(ChangeCategory::Correct, 30.0)]).unwrap(),
            30.0
        );
        assert!(estimate_depth_for_del(&[]).is_err());
        assert!(estimate_depth_for_del(&[mk(ChangeCategory::ToDel, 5.0)]).is_err());
    }

    #[test]
    fn sicd_assignment_is_consistent() {
        let elements = vec![signal("a", 30.0, -4.0, 3.0), signal("b", 30.0, 4.0, 3.0)];
        let refs: Vec<&MapElement> = elements.iter().collect();
        let pose = level_camera([0.0, 0.0, 1.5]);
        let kinds = [ElementKind::TrafficSignal];
        // Find a seed where one element is to_add and one correct.
        let mut found = false;
        for seed in 0..64 {
            let out = synthesize_sicd_frame(
                &refs,
                &pose,
                &small_k(),
                &kinds,
                &wide_prior(),
                &SynthParams {
                    p_del: 0.0,
                    ..SynthParams::default()
                },
                seed,
            )
            .unwrap();
            let cats: Vec<ChangeCategory> = out.labels.iter().map(|l| l.category).collect();
            if cats.contains(&ChangeCategory::ToAdd) && cats.contains(&ChangeCategory::Correct) {
                found = true;
                // The to_add element must have no raster evidence, the correct
                // element must have raster evidence.
                for label in &out.labels {
                    let g = &label.geom;
                    let mut any_fill = false;
                    for py in g.y1().max(0.0) as usize..(g.y2().ceil() as usize).min(64) {
                        for px in g.x1().max(0.0) as usize..(g.x2().ceil() as usize).min(64) {
                            if out.raster.pixels[(0, py, px)] != 0 {
                                any_fill = true;
                            }
                        }
                    }
                    match label.category {
                        ChangeCategory::ToAdd => assert!(!any_fill, "to_add has raster evidence"),
                        ChangeCategory::Correct => {
                            assert!(any_fill, "correct lacks raster evidence")
                        }
                        ChangeCategory::ToDel => {}
                    }
                }
                break;
            }
        }
        assert!(found, "no seed produced a mixed assignment");
    }

    #[test]
    fn sicd_zero_elements_can_still_place_to_del() {
        let pose = level_camera([0.0, 0.0, 1.5]);
        let kinds = [ElementKind::TrafficSignal];
        let mut got_del = false;
        for seed in 0..32 {
            let out = synthesize_sicd_frame(
                &[],
                &pose,
                &small_k(),
                &kinds,
                &wide_prior(),
                &SynthParams::default(),
                seed,
            )
            .unwrap();
            assert!(out
                .labels
                .iter()
                .all(|l| l.category == ChangeCategory::ToDel));
            if !out.labels.is_empty() {
                got_del = true;
                // to_del has raster evidence.
                let g = &out.labels[0].geom;
                assert_ne!(
                    out.raster.pixels[(0, g.cy as usize, g.cx as usize)],
                    0,
                    "to_del must be drawn into the raster"
                );
            }
        }
        assert!(got_del);
    }

    #[test]
    fn sicd_fixed_seed_is_deterministic() {
        let elements = vec![signal("a", 25.0, -3.0, 3.0), signal("b", 40.0, 5.0, 4.0)];
        let refs: Vec<&MapElement> = elements.iter().collect();
        let pose = level_camera([0.0, 0.0, 1.5]);
        let kinds = [ElementKind::TrafficSignal];
        let a = synthesize_sicd_frame(
            &refs,
            &pose,
            &small_k(),
            &kinds,
            &wide_prior(),
            &SynthParams::default(),
            1234,
        )
        .unwrap();
        let b = synthesize_sicd_frame(
            &refs,
            &pose,
            &small_k(),
            &kinds,
            &wide_prior(),
            &SynthParams::default(),
            1234,
        )
        .unwrap();
        assert_eq!(a.raster.pixels, b.raster.pixels);
        assert_eq!(a.labels, b.labels);
    }

    fn clip_poses(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| level_camera([i as f64 * 1.5, 0.0, 1.5]))
            .collect()
    }

    #[test]
    fn vscd_static_pose_gives_identical_labels_every_frame() {
        let elements = vec![signal("a", 30.0, -4.0, 3.0), signal("b", 30.0, 4.0, 3.0)];
        let poses = vec![level_camera([0.0, 0.0, 1.5]); 4];
        let clip = synthesize_vscd_clip(
            &elements,
            &poses,
            &small_k(),
            &[ElementKind::TrafficSignal],
            &RoiConfig::default(),
            &wide_prior(),
            &SynthParams::default(),
            7,
        )
        .unwrap();
        for f in &clip.frames[1..] {
            assert_eq!(f.labels, clip.frames[0].labels);
            assert_eq!(f.raster.pixels, clip.frames[0].raster.pixels);
        }
    }

    #[test]
    fn vscd_to_del_reprojects_consistently() {
        let elements = vec![signal("a", 45.0, -5.0, 3.0), signal("b", 45.0, 5.0, 3.0)];
        let poses = clip_poses(6);
        let mut checked = false;
        for seed in 0..64 {
            let clip = synthesize_vscd_clip(
                &elements,
                &poses,
                &small_k(),
                &[ElementKind::TrafficSignal],
                &RoiConfig::default(),
                &wide_prior(),
                &SynthParams {
                    p_del: 1.0,
                    ..SynthParams::default()
                },
                seed,
            )
            .unwrap();
            let Some(del3d) = clip
                .labels_3d
                .iter()
                .find(|l| l.category == ChangeCategory::ToDel)
            else {
                continue;
            };
            checked = true;
            // In every frame carrying a to_del label, the label center must
            // match the direct projection of the 3D point to < 1 px.
            for (idx, frame) in clip.frames.iter().enumerate() {
                for label in frame
                    .labels
                    .iter()
                    .filter(|l| l.category == ChangeCategory::ToDel)
                {
                    let (u, v, d) = project(&del3d.world_center, &poses[idx], &small_k()).unwrap();
                    assert!(d > 0.0);
                    let err = ((label.geom.cx - u).powi(2) + (label.geom.cy - v).powi(2)).sqrt();
                    assert!(err < 1.0, "frame {idx}: reprojection drift {err} px");
                }
            }
            break;
        }
        assert!(checked, "no seed produced a to_del clip");
    }

    #[test]
    fn vscd_element_leaving_frustum_drops_label() {
        // Element placed so the advancing camera passes it mid-clip.
        let elements = vec![signal("a", 6.0, -2.0, 2.0)];
        let poses = clip_poses(8);
        let clip = synthesize_vscd_clip(
            &elements,
            &poses,
            &small_k(),
            &[ElementKind::TrafficSignal],
            &RoiConfig::default(),
            &wide_prior(),
            &SynthParams {
                p_del: 0.0,
                ..SynthParams::default()
            },
            3,
        )
        .unwrap();
        let with_label = clip.frames.iter().filter(|f| !f.labels.is_empty()).count();
        assert!(with_label >= 1, "element should be visible early");
        assert!(
            with_label < clip.frames.len(),
            "element should leave the frustum"
        );
    }

    #[test]
    fn vscd_empty_clip_errors() {
        let res = synthesize_vscd_clip(
            &[],
            &[],
            &small_k(),
            &[ElementKind::TrafficSignal],
            &RoiConfig::default(),
            &wide_prior(),
            &SynthParams::default(),
            0,
        );
        assert!(res.is_err());
    }

    #[test]
    fn world_image_shows_world_elements_only() {
        let e = signal("a", 20.0, 0.0, 2.0);
        let pose = level_camera([0.0, 0.0, 1.5]);
        let k = small_k();
        let img = render_world_image(&[&e], &pose, &k, 42).unwrap();
        let (_, bbox) = project_element_quad(&e, &pose, &k).unwrap().unwrap();
        // Housing pixels are dark; the background is not.
        let cx = bbox.cx as usize;
        let top_y = (bbox.y1() + 1.5) as usize;
        assert!(img[(2, top_y, cx)] < 60);
        assert!(img[(2, 2, 2)] > 80);
        // Deterministic.
        let img2 = render_world_image(&[&e], &pose, &k, 42).unwrap();
        assert_eq!(img, img2);
    }

    #[test]
    fn change_category_serde_names() {
        assert_eq!(
            serde_json::to_string(&ChangeCategory::ToAdd).unwrap(),
            "\"to_add\""
        );
        let c: ChangeCategory = serde_json::from_str("\"be_corrected\"").unwrap();
        assert_eq!(c, ChangeCategory::Correct);
    }

    #[test]
    fn change_box_label_schema() {
        let b = ChangeBox {
            geom: BoxPx::new(10.0, 12.0, 4.0, 8.0),
            category: ChangeCategory::ToDel,
            element_id: None,
        };
        let json = serde_json::to_value(&b).unwrap();
        assert_eq!(json["cx"], 10.0);
        assert_eq!(json["category"], "to_del");
        assert!(json["element_id"].is_null());
    }
}
