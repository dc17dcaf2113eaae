//! `hmcd synth sicd|vscd`: generate a labeled dataset on disk.

use std::collections::BTreeMap;
use std::path::Path;

use crate::boxes::BoxPx;
use crate::camera::{
    rasterize, save_image_png, save_raster_png, write_manifest, FrameRecord, Intrinsics, Pose,
    RasterImage,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::map::{query_roi, ElementKind, HdMap, MapElement};
use crate::synth::{
    build_prior_region, render_world_image, synthesize_sicd_frame, synthesize_vscd_clip,
    ChangeBox, ClipRecord, ClipsFile, FrameLabels, PriorRegion, SynthParams,
};
use crate::training::DatasetMeta;

/// Splitmix-style per-item seed derivation.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct LoadedFrames {
    records: Vec<FrameRecord>,
    poses: Vec<Pose>,
    intrinsics: Intrinsics,
}

fn load_frames(frames_path: &Path) -> Result<LoadedFrames> {
    let records = crate::camera::read_manifest(frames_path)?;
    if records.is_empty() {
        return Err(Error::schema(format!("{frames_path:?} lists no frames")));
    }
    let intrinsics = records[0].intrinsics;
    if intrinsics.width != intrinsics.height {
        return Err(Error::schema(format!(
            "synthesis needs square images, got {}x{}",
            intrinsics.width, intrinsics.height
        )));
    }
    let mut poses = Vec::with_capacity(records.len());
    for r in &records {
        if r.intrinsics != intrinsics {
            return Err(Error::schema("all frames must share intrinsics"));
        }
        poses.push(r.pose()?);
    }
    Ok(LoadedFrames {
        records,
        poses,
        intrinsics,
    })
}

/// First pass: per-frame ROI queries and the prior region built from every
/// real projected light box.
fn build_prior<'m>(
    map: &'m HdMap,
    frames: &LoadedFrames,
    kinds: &[ElementKind],
    cfg: &RunConfig,
) -> Result<(Vec<Vec<&'m MapElement>>, PriorRegion)> {
    let mut visible_per_frame = Vec::with_capacity(frames.records.len());
    let mut box_sets: Vec<Vec<BoxPx>> = Vec::with_capacity(frames.records.len());
    for pose in &frames.poses {
        let visible = query_roi(map, &pose.position, &pose.forward(), &cfg.roi)?;
        let (_, projected) = rasterize(&visible, pose, &frames.intrinsics, kinds)?;
        box_sets.push(projected.iter().map(|p| p.bbox).collect());
        visible_per_frame.push(visible);
    }
    let prior = build_prior_region(
        &box_sets,
        (frames.intrinsics.width, frames.intrinsics.height),
        cfg.synth.prior_threshold,
    )?;
    Ok((visible_per_frame, prior))
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("rasters"))?;
    std::fs::create_dir_all(out.join("labels"))?;
    Ok(())
}

fn write_frame_files(
    out: &Path,
    frame_id: &str,
    world: &ndarray::Array3<u8>,
    raster: &RasterImage,
    labels: &[ChangeBox],
) -> Result<()> {
    save_image_png(world, &out.join("images").join(format!("{frame_id}.png")))?;
    save_raster_png(raster, &out.join("rasters").join(format!("{frame_id}.png")))?;
    let payload = FrameLabels {
        frame: frame_id.to_string(),
        boxes: labels.to_vec(),
    };
    std::fs::write(
        out.join("labels").join(format!("{frame_id}.json")),
        serde_json::to_string_pretty(&payload)?,
    )?;
    Ok(())
}

fn print_summary(counts: &BTreeMap<&'static str, usize>, frames: usize, out: &Path) {
    println!("wrote {frames} frames to {}", out.display());
    for (cat, n) in counts {
        println!("  {cat:>8}: {n} boxes");
    }
}

pub fn run_synth(
    map_path: &Path,
    frames_path: &Path,
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
    vscd: bool,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    let map = HdMap::load(map_path)?;
    let kinds = if map.elements.is_empty() {
        vec![ElementKind::TrafficSignal]
    } else {
        map.kinds()
    };
    let frames = load_frames(frames_path)?;
    let (visible_per_frame, prior) = build_prior(&map, &frames, &kinds, &cfg)?;
    prepare_out_dir(out)?;

    let params = SynthParams {
        p_del: cfg.synth.p_del,
        margin_px: cfg.synth.margin_px,
        single_event: cfg.synth.single_event,
    };
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut out_records = Vec::with_capacity(frames.records.len());

    if !vscd {
        for (idx, rec) in frames.records.iter().enumerate() {
            let frame_id = rec.frame_id();
            let pose = &frames.poses[idx];
            let frame_seed = derive_seed(seed, idx as u64);
            let synth = synthesize_sicd_frame(
                &visible_per_frame[idx],
                pose,
                &frames.intrinsics,
                &kinds,
                &prior,
                &params,
                frame_seed,
            )?;
            let world = render_world_image(
                &visible_per_frame[idx],
                pose,
                &frames.intrinsics,
                derive_seed(frame_seed, 0x57),
            )?;
            write_frame_files(out, &frame_id, &world, &synth.raster, &synth.labels)?;
            for l in &synth.labels {
                *counts.entry(l.category.as_str()).or_default() += 1;
            }
            let mut out_rec = rec.clone();
            out_rec.image_path = format!("images/{frame_id}.png");
            out_records.push(out_rec);
        }
    } else {
        // Group frames by clip, keeping first-appearance order.
        let mut clip_order: Vec<String> = Vec::new();
        for rec in &frames.records {
            if !clip_order.contains(&rec.clip_id) {
                clip_order.push(rec.clip_id.clone());
            }
        }
        let mut clip_records = Vec::new();
        for (clip_idx, clip_id) in clip_order.iter().enumerate() {
            let mut members: Vec<usize> = (0..frames.records.len())
                .filter(|&i| &frames.records[i].clip_id == clip_id)
                .collect();
            members.sort_by_key(|&i| frames.records[i].frame_idx);
            let poses: Vec<Pose> = members.iter().map(|&i| frames.poses[i]).collect();
            let clip = synthesize_vscd_clip(
                &map.elements,
                &poses,
                &frames.intrinsics,
                &kinds,
                &cfg.roi,
                &prior,
                &params,
                derive_seed(seed, clip_idx as u64),
            )?;
            let mut frame_ids = Vec::with_capacity(members.len());
            for (pos, &rec_idx) in members.iter().enumerate() {
                let rec = &frames.records[rec_idx];
                let frame_id = rec.frame_id();
                let world = render_world_image(
                    &visible_per_frame[rec_idx],
                    &frames.poses[rec_idx],
                    &frames.intrinsics,
                    derive_seed(derive_seed(seed, clip_idx as u64), pos as u64),
                )?;
                let vf = &clip.frames[pos];
                write_frame_files(out, &frame_id, &world, &vf.raster, &vf.labels)?;
                for l in &vf.labels {
                    *counts.entry(l.category.as_str()).or_default() += 1;
                }
                let mut out_rec = rec.clone();
                out_rec.image_path = format!("images/{frame_id}.png");
                out_records.push(out_rec);
                frame_ids.push(frame_id);
            }
            clip_records.push(ClipRecord {
                clip_id: clip_id.clone(),
                category: clip.category,
                frames: frame_ids,
            });
        }
        std::fs::write(
            out.join("clips.json"),
            serde_json::to_string_pretty(&ClipsFile {
                clips: clip_records,
            })?,
        )?;
    }

    write_manifest(&out.join("manifest.jsonl"), &out_records)?;
    let meta = DatasetMeta {
        schema_version: crate::LABEL_SCHEMA_VERSION,
        dataset_kind: if vscd { "vscd".into() } else { "sicd".into() },
        kinds: kinds.clone(),
        input_size: frames.intrinsics.width as usize,
    };
    std::fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    print_summary(&counts, out_records.len(), out);
    Ok(())
}
