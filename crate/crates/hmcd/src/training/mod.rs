//! Dataset loading, target building, and the optimization loop.

pub mod checkpoint;
pub mod dataset;
pub mod optim;
pub mod targets;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_dataset, Dataset, DatasetItem, DatasetMeta};
pub use optim::{OptimKind, Optimizer};
pub use targets::build_targets;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::{raw_values, AnchorSet, DiffNet, TemporalState};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, TargetTensor};
use crate::nn::{GradStore, Tape};

/// Gradient workers run this many items concurrently before a deterministic
/// in-order reduction.
const PAR_CHUNK: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub input_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimKind,
    pub epochs: usize,
    pub seed: u64,
    pub temporal: bool,
    /// Frames per clip in temporal mode.
    pub clip_len: usize,
    /// Stop once the mean per-image loss drops below this.
    pub target_loss_per_image: Option<f64>,
    /// Cadence (in steps) of the early-stop evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_size: 224,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimKind::Adam,
            epochs: 50,
            seed: 0,
            temporal: false,
            clip_len: 8,
            target_loss_per_image: None,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::contract("input_size must be a positive multiple of 32"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::contract("batch_size, epochs, eval_every must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.temporal && self.clip_len < 2 {
            return Err(Error::contract("temporal mode needs clip_len >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: usize,
    /// Per-step batch loss breakdown (localization term normalized over the
    /// batch's responsible pairs; confidence/category terms summed).
    pub history: Vec<LossBreakdown>,
    /// Mean per-image total loss at the end of training.
    pub final_per_image_loss: f64,
    pub stopped_early: bool,
}

fn sum_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_giou += b.l_giou;
    acc.l_conf += b.l_conf;
    acc.l_prob += b.l_prob;
    acc.total += b.total;
    acc.n_pairs += b.n_pairs;
}

fn zero_breakdown() -> LossBreakdown {
    LossBreakdown {
        l_giou: 0.0,
        l_conf: 0.0,
        l_prob: 0.0,
        total: 0.0,
        n_pairs: 0,
    }
}

/// Forward + backward of one single-frame item; returns grads and the loss
/// terms under the batch-wide localization normalizer.
fn item_grads(
    net: &DiffNet,
    image: &Array3<f64>,
    raster: &Array3<f64>,
    targets: &TargetTensor,
    lcfg: &LossConfig,
    giou_norm: f64,
) -> Result<(GradStore, LossBreakdown)> {
    let mut tape = Tape::new(&net.params);
    let img = tape.input(image.clone());
    let ras = tape.input(raster.clone());
    let nodes = net.forward(&mut tape, img, ras)?;
    let raw = raw_values(&tape, &nodes);
    let (breakdown, grad_raw) = total_loss(&raw, targets, lcfg, Some(giou_norm))?;
    let seeds = nodes
        .raw
        .iter()
        .zip(grad_raw.into_iter())
        .map(|(&n, g)| (n, g))
        .collect();
    let mut grads = net.grad_store();
    tape.backward(seeds, &mut grads)?;
    Ok((grads, breakdown))
}

/// Forward + backward through a whole clip (truncated BPTT over the clip).
fn clip_grads(
    net: &DiffNet,
    frames: &[(&Array3<f64>, &Array3<f64>, &TargetTensor)],
    lcfg: &LossConfig,
    giou_norm: f64,
) -> Result<(GradStore, LossBreakdown)> {
    let mut tape = Tape::new(&net.params);
    let zero = TemporalState::zeros(&net.cfg);
    let mut state = (tape.input(zero.hidden), tape.input(zero.cell));
    let mut seeds = Vec::new();
    let mut breakdown = zero_breakdown();
    for (image, raster, targets) in frames {
        let img = tape.input((*image).clone());
        let ras = tape.input((*raster).clone());
        let (nodes, next_state) = net.forward_temporal_step(&mut tape, img, ras, state)?;
        state = next_state;
        let raw = raw_values(&tape, &nodes);
        let (b, grad_raw) = total_loss(&raw, targets, lcfg, Some(giou_norm))?;
        sum_breakdown(&mut breakdown, &b);
        seeds.extend(nodes.raw.iter().zip(grad_raw.into_iter()).map(|(&n, g)| (n, g)));
    }
    let mut grads = net.grad_store();
    tape.backward(seeds, &mut grads)?;
    Ok((grads, breakdown))
}

/// Mean per-image total loss over the dataset (per-image localization mean).
pub fn mean_per_image_loss(
    net: &DiffNet,
    items: &[(&Array3<f64>, &Array3<f64>)],
    targets: &[TargetTensor],
    lcfg: &LossConfig,
) -> Result<f64> {
    let totals: Result<Vec<f64>> = items
        .par_iter()
        .zip(targets.par_iter())
        .map(|((image, raster), t)| {
            let raw = net.infer(image, raster)?;
            Ok(total_loss(&raw, t, lcfg, None)?.0.total)
        })
        .collect();
    let totals = totals?;
    Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
}

/// Mean per-image loss in temporal mode: clips run with carried state.
pub fn mean_per_image_loss_temporal(
    net: &DiffNet,
    clips: &[Vec<(&Array3<f64>, &Array3<f64>, &TargetTensor)>],
    lcfg: &LossConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for clip in clips {
        let frames: Vec<(Array3<f64>, Array3<f64>)> = clip
            .iter()
            .map(|(i, r, _)| ((*i).clone(), (*r).clone()))
            .collect();
        let (raws, _) = net.infer_clip(&frames, None)?;
        for (raw, (_, _, t)) in raws.iter().zip(clip.iter()) {
            sum += total_loss(raw, t, lcfg, None)?.0.total;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Train the network in place. Deterministic for a fixed seed: data order,
/// initialization, and gradient reduction order are all fixed.
pub fn train(
    net: &mut DiffNet,
    data: &Dataset,
    anchors: &AnchorSet,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    lcfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    if net.cfg.input_size != tcfg.input_size {
        return Err(Error::shape(format!(
            "network input {} vs train config {}",
            net.cfg.input_size, tcfg.input_size
        )));
    }

    let targets: Vec<TargetTensor> = data
        .items
        .iter()
        .map(|it| build_targets(&it.labels, anchors, tcfg.input_size))
        .collect::<Result<_>>()?;

    // Work units: single frames, or whole clips in temporal mode.
    let clip_groups = data.clip_groups();
    let units: Vec<Vec<usize>> = if tcfg.temporal {
        clip_groups.iter().map(|(_, idxs)| idxs.clone()).collect()
    } else {
        (0..data.items.len()).map(|i| vec![i]).collect()
    };

    let mut optimizer = Optimizer::new(tcfg.optimizer, tcfg.learning_rate, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7261_696e);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut step = 0usize;

    'outer: for _epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..units.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for batch in order.chunks(tcfg.batch_size) {
            let giou_norm: usize = batch
                .iter()
                .flat_map(|&u| units[u].iter())
                .map(|&i| targets[i].num_responsible())
                .sum();
            let giou_norm = (giou_norm as f64).max(1.0);

            let mut batch_grads = net.grad_store();
            let mut batch_loss = zero_breakdown();
            for chunk in batch.chunks(PAR_CHUNK) {
                let results: Result<Vec<(GradStore, LossBreakdown)>> = chunk
                    .par_iter()
                    .map(|&u| {
                        if tcfg.temporal {
                            let frames: Vec<_> = units[u]
                                .iter()
                                .map(|&i| {
                                    (&data.items[i].image, &data.items[i].raster, &targets[i])
                                })
                                .collect();
                            clip_grads(net, &frames, lcfg, giou_norm)
                        } else {
                            let i = units[u][0];
                            item_grads(
                                net,
                                &data.items[i].image,
                                &data.items[i].raster,
                                &targets[i],
                                lcfg,
                                giou_norm,
                            )
                        }
                    })
                    .collect();
                for (g, b) in results? {
                    batch_grads.add_assign(&g);
                    sum_breakdown(&mut batch_loss, &b);
                }
            }

            if !batch_loss.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {step}: {batch_loss:?}"
                )));
            }
            optimizer.step(&mut net.params, &batch_grads);
            history.push(batch_loss);
            step += 1;

            if let Some(target) = tcfg.target_loss_per_image {
                if step % tcfg.eval_every == 0 {
                    let loss = eval_loss(net, data, &targets, tcfg, lcfg)?;
                    if loss < target {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let final_per_image_loss = eval_loss(net, data, &targets, tcfg, lcfg)?;
    Ok(TrainReport {
        steps: step,
        history,
        final_per_image_loss,
        stopped_early,
    })
}

fn eval_loss(
    net: &DiffNet,
    data: &Dataset,
    targets: &[TargetTensor],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<f64> {
    if tcfg.temporal {
        let clips: Vec<Vec<(&Array3<f64>, &Array3<f64>, &TargetTensor)>> = data
            .clip_groups()
            .iter()
            .map(|(_, idxs)| {
                idxs.iter()
                    .map(|&i| (&data.items[i].image, &data.items[i].raster, &targets[i]))
                    .collect()
            })
            .collect();
        mean_per_image_loss_temporal(net, &clips, lcfg)
    } else {
        let items: Vec<(&Array3<f64>, &Array3<f64>)> = data
            .items
            .iter()
            .map(|it| (&it.image, &it.raster))
            .collect();
        mean_per_image_loss(net, &items, targets, lcfg)
    }
}
