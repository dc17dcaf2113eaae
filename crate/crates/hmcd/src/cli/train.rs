//! `hmcd train`: fit the detector on a synthesized dataset.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::diffnet::{kmeans_anchors, DiffNet, ModelConfig};
use crate::error::{Error, Result};
use crate::training::{load_checkpoint, load_dataset, save_checkpoint, train, TrainConfig};

pub fn run_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    init_from: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dataset = load_dataset(data)?;
    let input_size = cfg.model.input_size.unwrap_or(dataset.meta.input_size);
    if input_size != dataset.meta.input_size {
        return Err(Error::schema(format!(
            "config input_size {} vs dataset {} (resizing is out of scope)",
            input_size, dataset.meta.input_size
        )));
    }

    let anchors = match cfg.anchor_set()? {
        Some(a) => a,
        None => {
            let boxes: Vec<crate::boxes::BoxPx> = dataset
                .items
                .iter()
                .flat_map(|it| it.labels.iter().map(|l| l.geom))
                .collect();
            kmeans_anchors(&boxes, input_size, cfg.seed)
        }
    };

    let mut model_cfg = ModelConfig::by_preset(&cfg.model.preset, input_size)?;
    model_cfg.raster_channels = dataset.meta.kinds.len();
    model_cfg.temporal = cfg.train.temporal;
    let mut net = DiffNet::new(model_cfg, cfg.seed)?;
    if let Some(ckpt_path) = init_from {
        let ckpt = load_checkpoint(ckpt_path)?;
        ckpt.apply_by_name(&mut net, false)?;
        println!("warm-started from {}", ckpt_path.display());
    }

    let tcfg = TrainConfig {
        input_size,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        optimizer: cfg.train.optimizer,
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        temporal: cfg.train.temporal,
        clip_len: cfg.train.clip_len,
        target_loss_per_image: cfg.train.target_loss_per_image,
        eval_every: cfg.train.eval_every,
    };

    let report = train(&mut net, &dataset, &anchors, &tcfg, &cfg.loss)?;

    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.hmcd");
    save_checkpoint(&ckpt_path, &net, &anchors, cfg.echo())?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("loss.csv"))?);
    writeln!(csv, "step,l_giou,l_conf,l_prob,total")?;
    for (step, b) in report.history.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{}",
            step + 1,
            b.l_giou,
            b.l_conf,
            b.l_prob,
            b.total
        )?;
    }
    csv.flush()?;

    println!(
        "trained {} steps; final per-image loss {:.6}{}",
        report.steps,
        report.final_per_image_loss,
        if report.stopped_early {
            " (target reached)"
        } else {
            ""
        }
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}
