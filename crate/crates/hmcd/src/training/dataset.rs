//! On-disk dataset layout written by `hmcd synth` and consumed by training
//! and evaluation.
//!
//! ```text
//! <dir>/dataset.json      metadata: schema, kinds palette, input size
//! <dir>/manifest.jsonl    one frame record per line
//! <dir>/images/<id>.png   camera-branch image
//! <dir>/rasters/<id>.png  map-branch raster
//! <dir>/labels/<id>.json  labeled boxes
//! <dir>/clips.json        clip grouping and categories (video datasets)
//! ```

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::camera::{load_image_png, load_raster_png, read_manifest, FrameRecord};
use crate::error::{Error, Result};
use crate::map::ElementKind;
use crate::synth::{ClipsFile, FrameLabels};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub dataset_kind: String,
    pub kinds: Vec<ElementKind>,
    pub input_size: usize,
}

/// One loaded frame: normalized tensors plus its labels.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub frame_id: String,
    pub clip_id: String,
    pub frame_idx: u32,
    /// `[3, N, N]` in [0, 1].
    pub image: Array3<f64>,
    /// `[kinds, N, N]` in {0, 1}.
    pub raster: Array3<f64>,
    pub labels: Vec<crate::synth::ChangeBox>,
    pub record: FrameRecord,
}

#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub items: Vec<DatasetItem>,
    pub clips: Option<ClipsFile>,
}

impl Dataset {
    /// Frame indices grouped by clip, time-ordered within each clip.
    pub fn clip_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        for item in &self.items {
            if !order.contains(&item.clip_id) {
                order.push(item.clip_id.clone());
            }
        }
        order
            .into_iter()
            .map(|clip_id| {
                let mut idxs: Vec<usize> = self
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(_, it)| it.clip_id == clip_id)
                    .map(|(i, _)| i)
                    .collect();
                idxs.sort_by_key(|&i| self.items[i].frame_idx);
                (clip_id, idxs)
            })
            .collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.json");
    let meta: DatasetMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::schema(format!("missing {meta_path:?}: {e}")))?,
    )
    .map_err(|e| Error::schema(format!("{meta_path:?}: {e}")))?;
    if meta.schema_version != crate::LABEL_SCHEMA_VERSION {
        return Err(Error::schema(format!(
            "dataset schema {} unsupported (expected {})",
            meta.schema_version,
            crate::LABEL_SCHEMA_VERSION
        )));
    }

    let records = read_manifest(&dir.join("manifest.jsonl"))?;
    let mut items = Vec::with_capacity(records.len());
    let mut clip_intrinsics: std::collections::BTreeMap<String, crate::camera::Intrinsics> =
        std::collections::BTreeMap::new();
    for rec in records {
        let frame_id = rec.frame_id();
        if rec.intrinsics.width as usize != meta.input_size
            || rec.intrinsics.height as usize != meta.input_size
        {
            return Err(Error::schema(format!(
                "frame {frame_id}: image {}x{} does not match dataset input size {}",
                rec.intrinsics.width, rec.intrinsics.height, meta.input_size
            )));
        }
        match clip_intrinsics.get(&rec.clip_id) {
            Some(k) if *k != rec.intrinsics => {
                return Err(Error::schema(format!(
                    "clip {}: mixed intrinsics across frames",
                    rec.clip_id
                )));
            }
            None => {
                clip_intrinsics.insert(rec.clip_id.clone(), rec.intrinsics);
            }
            _ => {}
        }
        let image = load_image_png(&dir.join(&rec.image_path))?;
        let raster = load_raster_png(&dir.join("rasters").join(format!("{frame_id}.png")), &meta.kinds)?;
        let labels_path = dir.join("labels").join(format!("{frame_id}.json"));
        let labels: FrameLabels = serde_json::from_str(
            &std::fs::read_to_string(&labels_path)
                .map_err(|e| Error::schema(format!("missing {labels_path:?}: {e}")))?,
        )
        .map_err(|e| Error::schema(format!("{labels_path:?}: {e}")))?;
        items.push(DatasetItem {
            frame_id,
            clip_id: rec.clip_id.clone(),
            frame_idx: rec.frame_idx,
            image: crate::diffnet::to_input_tensor(&image),
            raster: crate::diffnet::to_input_tensor(&raster.pixels),
            labels: labels.boxes,
            record: rec,
        });
    }

    let clips_path = dir.join("clips.json");
    let clips = if clips_path.exists() {
        Some(
            serde_json::from_str(&std::fs::read_to_string(&clips_path)?)
                .map_err(|e| Error::schema(format!("{clips_path:?}: {e}")))?,
        )
    } else {
        None
    };

    Ok(Dataset { meta, items, clips })
}
