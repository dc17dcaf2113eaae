//! Run configuration: one declarative file (TOML, JSON fallback) holding
//! every tunable constant. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{AnchorPrior, AnchorSet, NmsMode};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::map::RoiConfig;
use crate::training::OptimKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    /// Defaults to the dataset's image size when absent.
    pub input_size: Option<usize>,
    /// Explicit anchor priors (nine `[pw, ph]` pairs). Absent: estimated by
    /// k-means over the training boxes, falling back to shipped defaults.
    pub anchors: Option<Vec<[f64; 2]>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            input_size: None,
            anchors: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsSection {
    pub mode: NmsMode,
    pub iou: f64,
    pub score_floor: f64,
    /// Decode confidence threshold applied before suppression.
    pub conf: f64,
}

impl Default for NmsSection {
    fn default() -> Self {
        NmsSection {
            mode: NmsMode::SoftLinear,
            iou: 0.45,
            score_floor: 0.001,
            conf: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimKind,
    pub epochs: usize,
    pub temporal: bool,
    pub clip_len: usize,
    pub target_loss_per_image: Option<f64>,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimKind::Adam,
            epochs: 50,
            temporal: false,
            clip_len: 8,
            target_loss_per_image: None,
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_thresh: f64,
    pub vote_threshold: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou_thresh: 0.5,
            vote_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Probability of attempting one to_del placement per frame/clip.
    pub p_del: f64,
    /// Pixel margin kept between to_del boxes and real lights.
    pub margin_px: f64,
    /// Co-occurrence threshold binarizing the prior region.
    pub prior_threshold: u32,
    /// Constrain clips to at most one change event.
    pub single_event: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            p_del: 0.5,
            margin_px: 2.0,
            prior_threshold: 2,
            single_event: false,
        }
    }
}

/// The complete run configuration with every constant surfaced.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub roi: RoiConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub nms: NmsSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl RunConfig {
    /// Parse TOML (preferred) or JSON, by extension with fallback.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::schema(format!("{path:?}: {e}")))?,
            Some("toml") => {
                toml::from_str(&text).map_err(|e| Error::schema(format!("{path:?}: {e}")))?
            }
            _ => match toml::from_str(&text) {
                Ok(cfg) => cfg,
                Err(toml_err) => serde_json::from_str(&text).map_err(|json_err| {
                    Error::schema(format!(
                        "{path:?}: not valid TOML ({toml_err}) nor JSON ({json_err})"
                    ))
                })?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        self.loss.validate()?;
        if let Some(anchors) = &self.model.anchors {
            if anchors.len() != 9 {
                return Err(Error::schema(format!(
                    "model.anchors must list exactly 9 [pw, ph] pairs (got {})",
                    anchors.len()
                )));
            }
        }
        if let Some(n) = self.model.input_size {
            if n == 0 || n % 32 != 0 {
                return Err(Error::schema(
                    "model.input_size must be a positive multiple of 32",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.synth.p_del) {
            return Err(Error::schema("synth.p_del must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.eval.iou_thresh) || self.eval.iou_thresh == 0.0 {
            return Err(Error::schema("eval.iou_thresh must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Anchors from the config, if explicitly pinned.
    pub fn anchor_set(&self) -> Result<Option<AnchorSet>> {
        match &self.model.anchors {
            None => Ok(None),
            Some(pairs) => {
                let priors: Vec<AnchorPrior> = pairs
                    .iter()
                    .map(|[w, h]| AnchorPrior { pw: *w, ph: *h })
                    .collect();
                let arr: [AnchorPrior; 9] = priors
                    .try_into()
                    .map_err(|_| Error::schema("model.anchors must have 9 entries"))?;
                Ok(Some(AnchorSet::new(arr)?))
            }
        }
    }

    /// The fully-resolved config as JSON for report provenance.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_fixed_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.roi.tau_dis_m, 100.0);
        assert!((cfg.roi.tau_ori_cos - (-0.8660254037844386)).abs() < 1e-12);
        assert_eq!(cfg.loss.lambda1, 1.0);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.loss.gamma, 2.0);
        assert_eq!(cfg.nms.iou, 0.45);
        assert_eq!(cfg.eval.vote_threshold, 3);
    }

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[loss]\nalpha = 0.25\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.alpha, 0.25);

        std::fs::write(&path, "seed = 7\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Schema(_))));

        std::fs::write(&path, "[loss]\nnot_a_field = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn json_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 3, "nms": {"mode": "hard"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.nms.mode, NmsMode::Hard);
    }

    #[test]
    fn bad_anchor_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[model]\nanchors = [[4.0, 8.0]]\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
