//! `hmcd heatmaps`: render the cross-difference features of one frame as
//! normalized grayscale PNGs, one per (scale, channel).

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::{load_checkpoint, load_dataset};

pub fn run_heatmaps(
    checkpoint: &Path,
    data: &Path,
    frame: &str,
    out: &Path,
    channels: usize,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let item = dataset
        .items
        .iter()
        .find(|it| it.frame_id == frame)
        .ok_or_else(|| Error::schema(format!("frame {frame:?} not found in {data:?}")))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let net = ckpt.build_net()?;
    if net.cfg.input_size != dataset.meta.input_size {
        return Err(Error::Checkpoint(format!(
            "checkpoint preset {:?} expects {}px input, dataset is {}px",
            net.cfg.preset, net.cfg.input_size, dataset.meta.input_size
        )));
    }

    let (_, features) = net.infer_with_features(&item.image, &item.raster)?;
    std::fs::create_dir_all(out)?;
    let input_size = net.cfg.input_size as u32;
    let mut written = 0usize;
    for (scale_idx, feat) in features.iter().enumerate() {
        let stride = crate::diffnet::SCALE_STRIDES[scale_idx];
        let (c, h, w) = feat.dim();
        for ch in 0..channels.min(c) {
            let plane = feat.index_axis(ndarray::Axis(0), ch);
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut img = image::GrayImage::new(input_size, input_size);
            for py in 0..input_size {
                for px in 0..input_size {
                    let fy = (py as usize * h / input_size as usize).min(h - 1);
                    let fx = (px as usize * w / input_size as usize).min(w - 1);
                    // Flat features render mid-gray instead of dividing by ~0.
                    let v = if hi - lo < 1e-12 {
                        128
                    } else {
                        ((plane[(fy, fx)] - lo) / (hi - lo) * 255.0).round() as u8
                    };
                    img.put_pixel(px, py, image::Luma([v]));
                }
            }
            let path = out.join(format!("pcd_s{stride}_c{ch}.png"));
            img.save(&path)?;
            written += 1;
        }
    }
    println!("wrote {written} heatmaps to {}", out.display());
    Ok(())
}
