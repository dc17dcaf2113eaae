//! `hmcd eval` and `hmcd eval-clips`: metrics reports over a dataset.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::diffnet::{decode_boxes, nms, AnchorSet, Detection, DiffNet, NmsConfig};
use crate::error::{Error, Result};
use crate::eval::{
    clip_classify, map_metric_frames, match_detections_frames, pr_curve_frames, prf,
};
use crate::synth::{ChangeBox, ChangeCategory};
use crate::training::{load_checkpoint, load_dataset, Dataset};

fn load_net(checkpoint: &Path, dataset: &Dataset) -> Result<(DiffNet, AnchorSet)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let net = ckpt.build_net()?;
    if net.cfg.input_size != dataset.meta.input_size {
        return Err(Error::Checkpoint(format!(
            "checkpoint preset {:?} expects {}px input, dataset is {}px",
            net.cfg.preset, net.cfg.input_size, dataset.meta.input_size
        )));
    }
    if net.cfg.raster_channels != dataset.meta.kinds.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint preset {:?} expects {} raster channels, dataset has {}",
            net.cfg.preset,
            net.cfg.raster_channels,
            dataset.meta.kinds.len()
        )));
    }
    Ok((net, ckpt.anchors))
}

/// Per-frame detections in dataset item order. Temporal checkpoints stream
/// clip by clip with carried state; single-frame checkpoints run frames in
/// parallel.
pub fn detect_frames(
    net: &DiffNet,
    dataset: &Dataset,
    anchors: &AnchorSet,
    nms_cfg: &crate::config::NmsSection,
) -> Result<Vec<Vec<Detection>>> {
    let suppress = NmsConfig {
        mode: nms_cfg.mode,
        iou: nms_cfg.iou,
        score_floor: nms_cfg.score_floor,
    };
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); dataset.items.len()];
    if net.cfg.temporal {
        for (_, idxs) in dataset.clip_groups() {
            let frames: Vec<_> = idxs
                .iter()
                .map(|&i| (dataset.items[i].image.clone(), dataset.items[i].raster.clone()))
                .collect();
            let (raws, _) = net.infer_clip(&frames, None)?;
            for (&i, raw) in idxs.iter().zip(raws.iter()) {
                let dets = decode_boxes(raw, anchors, nms_cfg.conf)?;
                out[i] = nms(&dets, &suppress);
            }
        }
    } else {
        let results: Result<Vec<Vec<Detection>>> = dataset
            .items
            .par_iter()
            .map(|item| {
                let raw = net.infer(&item.image, &item.raster)?;
                let dets = decode_boxes(&raw, anchors, nms_cfg.conf)?;
                Ok(nms(&dets, &suppress))
            })
            .collect();
        out = results?;
    }
    Ok(out)
}

pub fn run_eval(
    checkpoint: &Path,
    data: &Path,
    report_path: &Path,
    config: Option<&Path>,
    headline: &str,
    detections_out: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dataset = load_dataset(data)?;
    let (net, anchors) = load_net(checkpoint, &dataset)?;

    let dets = detect_frames(&net, &dataset, &anchors, &cfg.nms)?;
    let gts: Vec<Vec<ChangeBox>> = dataset.items.iter().map(|it| it.labels.clone()).collect();

    let matches = match_detections_frames(&dets, &gts, cfg.eval.iou_thresh)?;
    let (per_prf, micro) = prf(&matches);
    let (per_ap, map) = map_metric_frames(&dets, &gts, cfg.eval.iou_thresh)?;

    let per_category: serde_json::Map<String, serde_json::Value> = ChangeCategory::ALL
        .iter()
        .map(|cat| {
            let name = cat.as_str();
            let counts = matches.counts(*cat);
            let p = per_prf[name];
            (
                name.to_string(),
                json!({
                    "tp": counts.tp,
                    "fp": counts.fp,
                    "fn": counts.fn_,
                    "precision": p.precision,
                    "recall": p.recall,
                    "f_score": p.f_score,
                    "ap": per_ap[name],
                }),
            )
        })
        .collect();

    let report = json!({
        "schema_version": crate::LABEL_SCHEMA_VERSION,
        "headline": headline,
        "per_category": per_category,
        "micro": {
            "precision": micro.precision,
            "recall": micro.recall,
            "f_score": micro.f_score,
        },
        "map": map,
        "top1": serde_json::Value::Null,
        "config": cfg.echo(),
    });
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;

    // PR curve CSVs next to the report.
    let stem = report_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    for cat in ChangeCategory::ALL {
        let curve = pr_curve_frames(&dets, &gts, cat, cfg.eval.iou_thresh)?;
        let path = report_path.with_file_name(format!("{stem}_pr_{}.csv", cat.as_str()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "recall,precision")?;
        for (r, p) in curve {
            writeln!(f, "{r},{p}")?;
        }
        f.flush()?;
    }

    if let Some(path) = detections_out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (item, frame_dets) in dataset.items.iter().zip(dets.iter()) {
            let line = json!({"frame": item.frame_id, "detections": frame_dets});
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }

    match headline {
        "prf" => println!(
            "micro P {:.3} R {:.3} F {:.3} (mAP {:.3})",
            micro.precision, micro.recall, micro.f_score, map
        ),
        _ => println!(
            "mAP@{:.2} = {:.3} (micro F {:.3})",
            cfg.eval.iou_thresh, map, micro.f_score
        ),
    }
    println!("report: {}", report_path.display());
    Ok(())
}

pub fn run_eval_clips(
    checkpoint: &Path,
    clips_dir: &Path,
    report_path: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dataset = load_dataset(clips_dir)?;
    let clips = dataset.clips.clone().ok_or_else(|| {
        Error::schema(format!(
            "{clips_dir:?} has no clips.json; generate it with `hmcd synth vscd`"
        ))
    })?;
    let (net, anchors) = load_net(checkpoint, &dataset)?;
    let dets = detect_frames(&net, &dataset, &anchors, &cfg.nms)?;

    let index_of: std::collections::BTreeMap<&str, usize> = dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.frame_id.as_str(), i))
        .collect();

    let mut verdicts = Vec::new();
    let mut hits = 0usize;
    for clip in &clips.clips {
        let frame_dets: Vec<Vec<Detection>> = clip
            .frames
            .iter()
            .map(|fid| {
                index_of
                    .get(fid.as_str())
                    .map(|&i| dets[i].clone())
                    .ok_or_else(|| Error::schema(format!("clip frame {fid} missing from dataset")))
            })
            .collect::<Result<_>>()?;
        let verdict = clip_classify(&clip.clip_id, &frame_dets, cfg.eval.vote_threshold)?;
        if verdict.predicted == clip.category {
            hits += 1;
        }
        verdicts.push(json!({
            "clip_id": clip.clip_id,
            "truth": clip.category,
            "predicted": verdict.predicted,
            "counts": {
                "correct": verdict.counts[0],
                "to_del": verdict.counts[1],
                "to_add": verdict.counts[2],
            },
        }));
    }
    let top1 = hits as f64 / clips.clips.len().max(1) as f64;

    let report = json!({
        "schema_version": crate::LABEL_SCHEMA_VERSION,
        "clips": verdicts,
        "top1": top1,
        "vote_threshold": cfg.eval.vote_threshold,
        "config": cfg.echo(),
    });
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "top-1 accuracy {top1:.3} over {} clips (vote threshold {})",
        clips.clips.len(),
        cfg.eval.vote_threshold
    );
    println!("report: {}", report_path.display());
    Ok(())
}
