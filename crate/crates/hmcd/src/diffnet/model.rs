//! The feature-difference network: dual pyramid encoders, parallel cross
//! difference (PCD), feature propagation (FP), feature decoders (FD), and the
//! ConvLSTM temporal variant at the coarsest scale.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ANCHORS_PER_SCALE, FIELDS_PER_ANCHOR, HEAD_CHANNELS, SCALE_STRIDES};
use super::head::{RawPrediction, ScalePrediction};
use crate::error::{Error, Result};
use crate::nn::{he_conv_init, zeros_init, GradStore, NodeId, ParamId, ParamStore, Tape};

const LEAKY_SLOPE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
/// Initial confidence bias: sigma(-4) ~ 0.018 keeps early confidences low.
const CONF_BIAS_INIT: f64 = -4.0;

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlockIds {
    reduce: ConvIds,
    expand: ConvIds,
}

#[derive(Debug, Clone)]
struct StageIds {
    down: ConvIds,
    blocks: Vec<ResBlockIds>,
}

/// Feature taps of one encoder at strides 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub s8: NodeId,
    pub s16: NodeId,
    pub s32: NodeId,
}

impl FeaturePyramid {
    /// Tap for a scale index, 0 = coarsest (stride 32).
    pub fn at(&self, scale: usize) -> NodeId {
        match scale {
            0 => self.s32,
            1 => self.s16,
            _ => self.s8,
        }
    }
}

/// Raw head outputs (and PCD features) as tape nodes, coarse to fine.
#[derive(Debug, Clone)]
pub struct RawNodes {
    pub raw: [NodeId; 3],
    pub pcd: [NodeId; 3],
}

/// ConvLSTM state carried across the frames of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalState {
    pub hidden: Array3<f64>,
    pub cell: Array3<f64>,
}

impl TemporalState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (_, _, c32) = cfg.taps();
        let grid = cfg.input_size / 32;
        TemporalState {
            hidden: Array3::zeros((c32 / 2, grid, grid)),
            cell: Array3::zeros((c32 / 2, grid, grid)),
        }
    }
}

/// The Diff-Net model: parameters plus the wiring to run it on a [`Tape`].
pub struct DiffNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    raster_convs: Vec<ConvIds>,
    stem: ConvIds,
    stages: Vec<StageIds>,
    pcd_convs: [Vec<ConvIds>; 3],
    fp_convs: [ConvIds; 2],
    fd_a: [ConvIds; 3],
    fd_b: [ConvIds; 3],
    lstm_gates: Option<ConvIds>,
}

impl DiffNet {
    /// Build the network with seeded He initialization.
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamStore::new();
        let conv = |params: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        cout: usize,
                        cin: usize,
                        k: usize| {
            let w = params.register(format!("{name}.w"), he_conv_init(rng, cout, cin, k));
            let b = params.register(format!("{name}.b"), zeros_init(&[cout]));
            ConvIds { w, b }
        };

        // Raster encoder: 11 3x3 convs.
        let mut raster_convs = Vec::with_capacity(11);
        let mut cin = cfg.raster_channels;
        for (i, &cout) in cfg.raster_plan.channels.iter().enumerate() {
            raster_convs.push(conv(&mut params, &mut rng, &format!("raster.c{i:02}"), cout, cin, 3));
            cin = cout;
        }

        // Camera backbone: stem + 5 residual stages.
        let stem = conv(&mut params, &mut rng, "cam.stem", cfg.backbone.stem_channels, 3, 3);
        let mut stages = Vec::with_capacity(5);
        let mut prev = cfg.backbone.stem_channels;
        for (s, (&ch, &nblocks)) in cfg
            .backbone
            .stage_channels
            .iter()
            .zip(cfg.backbone.blocks_per_stage.iter())
            .enumerate()
        {
            let down = conv(&mut params, &mut rng, &format!("cam.s{s}.down"), ch, prev, 3);
            let mut blocks = Vec::with_capacity(nblocks);
            for r in 0..nblocks {
                let reduce = conv(
                    &mut params,
                    &mut rng,
                    &format!("cam.s{s}.r{r}.reduce"),
                    ch / 2,
                    ch,
                    1,
                );
                let expand = conv(
                    &mut params,
                    &mut rng,
                    &format!("cam.s{s}.r{r}.expand"),
                    ch,
                    ch / 2,
                    3,
                );
                blocks.push(ResBlockIds { reduce, expand });
            }
            stages.push(StageIds { down, blocks });
            prev = ch;
        }

        // PCD: difference followed by 4 convs, halving the channels.
        let scale_ch = cfg.scale_channels();
        let mut pcd_convs: [Vec<ConvIds>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (scale, &c) in scale_ch.iter().enumerate() {
            let stride = SCALE_STRIDES[scale];
            let plan = [(c / 2, c), (c / 2, c / 2), (c / 2, c / 2), (c / 2, c / 2)];
            for (i, &(cout, cin)) in plan.iter().enumerate() {
                pcd_convs[scale].push(conv(
                    &mut params,
                    &mut rng,
                    &format!("pcd{stride}.c{i}"),
                    cout,
                    cin,
                    3,
                ));
            }
        }

        // FP: upsampled coarse PCD output concatenated with camera features.
        let fp16 = conv(
            &mut params,
            &mut rng,
            "fp16",
            scale_ch[1],
            scale_ch[0] / 2 + scale_ch[1],
            3,
        );
        let fp8 = conv(
            &mut params,
            &mut rng,
            "fp8",
            scale_ch[2],
            scale_ch[1] / 2 + scale_ch[2],
            3,
        );

        // FD: lift c/2 -> c, then 1x1 to the head channels.
        let mut fd_a = Vec::with_capacity(3);
        let mut fd_b = Vec::with_capacity(3);
        for (scale, &c) in scale_ch.iter().enumerate() {
            let stride = SCALE_STRIDES[scale];
            fd_a.push(conv(&mut params, &mut rng, &format!("fd{stride}.a"), c, c / 2, 3));
            fd_b.push(conv(
                &mut params,
                &mut rng,
                &format!("fd{stride}.b"),
                HEAD_CHANNELS,
                c,
                1,
            ));
        }

        let lstm_gates = if cfg.temporal {
            let h = scale_ch[0] / 2;
            Some(conv(&mut params, &mut rng, "lstm.gates", 4 * h, 2 * h, 3))
        } else {
            None
        };

        // Bias the confidence channels low so early training is stable.
        for ids in &fd_b {
            let b = params.get_mut(ids.b);
            for anchor in 0..ANCHORS_PER_SCALE {
                b[[anchor * FIELDS_PER_ANCHOR + 4]] = CONF_BIAS_INIT;
            }
        }

        Ok(DiffNet {
            cfg,
            params,
            raster_convs,
            stem,
            stages,
            pcd_convs: pcd_convs.try_into().map_err(|_| Error::shape("pcd plan"))?,
            fp_convs: [fp16, fp8],
            fd_a: fd_a.try_into().map_err(|_| Error::shape("fd plan"))?,
            fd_b: fd_b.try_into().map_err(|_| Error::shape("fd plan"))?,
            lstm_gates,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter count of the camera encoder alone.
    pub fn backbone_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("cam."))
            .map(|(_, t)| t.len())
            .sum()
    }

    fn check_input(&self, tape: &Tape, node: NodeId, channels: usize, what: &str) -> Result<()> {
        let (c, h, w) = tape.value(node).dim();
        if c != channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::shape(format!(
                "{what} must be [{channels}, {}, {}], got [{c}, {h}, {w}]",
                self.cfg.input_size, self.cfg.input_size
            )));
        }
        Ok(())
    }

    /// The shallow 11-layer raster encoder with taps at strides 8/16/32.
    pub fn encode_raster(&self, tape: &mut Tape, raster: NodeId) -> Result<FeaturePyramid> {
        self.check_input(tape, raster, self.cfg.raster_channels, "raster input")?;
        let mut x = raster;
        let mut taps = Vec::new();
        for (i, ids) in self.raster_convs.iter().enumerate() {
            let stride = super::config::RasterEncoderPlan::STRIDES[i];
            let y = tape.conv2d(x, ids.w, Some(ids.b), stride, 1)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE);
            if super::config::RasterEncoderPlan::TAP_LAYERS.contains(&i) {
                taps.push(x);
            }
        }
        Ok(FeaturePyramid {
            s8: taps[0],
            s16: taps[1],
            s32: taps[2],
        })
    }

    /// The residual camera backbone with taps at strides 8/16/32.
    pub fn encode_camera(&self, tape: &mut Tape, image: NodeId) -> Result<FeaturePyramid> {
        self.check_input(tape, image, 3, "camera input")?;
        let y = tape.conv2d(image, self.stem.w, Some(self.stem.b), 1, 1)?;
        let mut x = tape.leaky_relu(y, LEAKY_SLOPE);
        let mut taps = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let y = tape.conv2d(x, stage.down.w, Some(stage.down.b), 2, 1)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE);
            for block in &stage.blocks {
                let r = tape.conv2d(x, block.reduce.w, Some(block.reduce.b), 1, 0)?;
                let r = tape.leaky_relu(r, LEAKY_SLOPE);
                let e = tape.conv2d(r, block.expand.w, Some(block.expand.b), 1, 1)?;
                let e = tape.leaky_relu(e, LEAKY_SLOPE);
                x = tape.add(x, e)?;
            }
            if s >= 2 {
                taps.push(x);
            }
        }
        Ok(FeaturePyramid {
            s8: taps[0],
            s16: taps[1],
            s32: taps[2],
        })
    }

    /// Parallel cross difference at one scale: elementwise difference of the
    /// camera-side and raster-side features, then four convolutions.
    pub fn pcd(&self, tape: &mut Tape, f_cam: NodeId, f_raster: NodeId, scale: usize) -> Result<NodeId> {
        let mut x = tape.sub(f_cam, f_raster)?;
        for ids in &self.pcd_convs[scale] {
            let y = tape.conv2d(x, ids.w, Some(ids.b), 1, 1)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// Feature propagation to the next finer scale: nearest-neighbor 2x
    /// upsample, concatenation with camera features, one convolution.
    pub fn fp(&self, tape: &mut Tape, coarse_pcd: NodeId, f_cam_finer: NodeId, finer_scale: usize) -> Result<NodeId> {
        let up = tape.upsample2x(coarse_pcd);
        let (_, uh, uw) = tape.value(up).dim();
        let (_, fh, fw) = tape.value(f_cam_finer).dim();
        if (uh, uw) != (fh, fw) {
            return Err(Error::shape(format!(
                "fp scale mismatch: upsampled {uh}x{uw} vs camera {fh}x{fw}"
            )));
        }
        let cat = tape.concat_channels(up, f_cam_finer)?;
        let ids = &self.fp_convs[finer_scale - 1];
        let y = tape.conv2d(cat, ids.w, Some(ids.b), 1, 1)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Feature decoder: 3x3 conv lifting c/2 to c, then a linear 1x1 conv to
    /// the `[3 * (num_class + 5)]` head channels.
    pub fn fd(&self, tape: &mut Tape, x: NodeId, scale: usize) -> Result<NodeId> {
        let a = tape.conv2d(x, self.fd_a[scale].w, Some(self.fd_a[scale].b), 1, 1)?;
        let a = tape.leaky_relu(a, LEAKY_SLOPE);
        tape.conv2d(a, self.fd_b[scale].w, Some(self.fd_b[scale].b), 1, 0)
    }

    /// Single-frame forward pass.
    pub fn forward(&self, tape: &mut Tape, image: NodeId, raster: NodeId) -> Result<RawNodes> {
        let cam = self.encode_camera(tape, image)?;
        let ras = self.encode_raster(tape, raster)?;
        self.head_from_pyramids(tape, &cam, &ras, None)
    }

    /// One temporal step: the coarsest PCD output feeds a ConvLSTM cell whose
    /// hidden state replaces it for decoding and propagation. Finer scales
    /// keep the single-frame wiring (skip connections from the encoders).
    pub fn forward_temporal_step(
        &self,
        tape: &mut Tape,
        image: NodeId,
        raster: NodeId,
        state: (NodeId, NodeId),
    ) -> Result<(RawNodes, (NodeId, NodeId))> {
        if self.lstm_gates.is_none() {
            return Err(Error::Checkpoint(format!(
                "preset {:?} was built without the temporal module",
                self.cfg.preset
            )));
        }
        let cam = self.encode_camera(tape, image)?;
        let ras = self.encode_raster(tape, raster)?;
        let mut new_state = state;
        let nodes = self.head_from_pyramids(tape, &cam, &ras, Some((state, &mut new_state)))?;
        Ok((nodes, new_state))
    }

    fn head_from_pyramids(
        &self,
        tape: &mut Tape,
        cam: &FeaturePyramid,
        ras: &FeaturePyramid,
        temporal: Option<((NodeId, NodeId), &mut (NodeId, NodeId))>,
    ) -> Result<RawNodes> {
        let x32 = self.pcd(tape, cam.s32, ras.s32, 0)?;
        let x32 = match temporal {
            None => x32,
            Some((state, out_state)) => {
                let (h, c) = self.convlstm_step(tape, x32, state)?;
                *out_state = (h, c);
                h
            }
        };
        let raw32 = self.fd(tape, x32, 0)?;

        let f16 = self.fp(tape, x32, cam.s16, 1)?;
        let x16 = self.pcd(tape, f16, ras.s16, 1)?;
        let raw16 = self.fd(tape, x16, 1)?;

        let f8 = self.fp(tape, x16, cam.s8, 2)?;
        let x8 = self.pcd(tape, f8, ras.s8, 2)?;
        let raw8 = self.fd(tape, x8, 2)?;

        Ok(RawNodes {
            raw: [raw32, raw16, raw8],
            pcd: [x32, x16, x8],
        })
    }

    /// ConvLSTM cell with per-gate layer normalization and ELU activations.
    pub fn convlstm_step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        (h_prev, c_prev): (NodeId, NodeId),
    ) -> Result<(NodeId, NodeId)> {
        let ids = self
            .lstm_gates
            .ok_or_else(|| Error::contract("temporal module not built"))?;
        let hch = tape.value(h_prev).dim().0;
        let xh = tape.concat_channels(x, h_prev)?;
        let gates = tape.conv2d(xh, ids.w, Some(ids.b), 1, 1)?;
        let pre_i = tape.slice_channels(gates, 0, hch)?;
        let pre_f = tape.slice_channels(gates, hch, hch)?;
        let pre_o = tape.slice_channels(gates, 2 * hch, hch)?;
        let pre_g = tape.slice_channels(gates, 3 * hch, hch)?;
        let ln_i = tape.layer_norm(pre_i, LN_EPS);
        let ln_f = tape.layer_norm(pre_f, LN_EPS);
        let ln_o = tape.layer_norm(pre_o, LN_EPS);
        let ln_g = tape.layer_norm(pre_g, LN_EPS);
        let i = tape.sigmoid(ln_i);
        let f = tape.sigmoid(ln_f);
        let o = tape.sigmoid(ln_o);
        let g = tape.elu(ln_g);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let ln_c = tape.layer_norm(c, LN_EPS);
        let act_c = tape.elu(ln_c);
        let h = tape.mul(o, act_c)?;
        Ok((h, c))
    }

    /// Inference on one frame pair; returns the raw prediction tensors.
    pub fn infer(&self, image: &Array3<f64>, raster: &Array3<f64>) -> Result<RawPrediction> {
        Ok(self.infer_with_features(image, raster)?.0)
    }

    /// Inference that also returns the PCD output features per scale
    /// (used by the heatmap renderer).
    pub fn infer_with_features(
        &self,
        image: &Array3<f64>,
        raster: &Array3<f64>,
    ) -> Result<(RawPrediction, Vec<Array3<f64>>)> {
        let mut tape = Tape::new(&self.params);
        let img = tape.input(image.clone());
        let ras = tape.input(raster.clone());
        let nodes = self.forward(&mut tape, img, ras)?;
        Ok((
            raw_values(&tape, &nodes),
            nodes.pcd.iter().map(|&n| tape.value(n).clone()).collect(),
        ))
    }

    /// Streaming temporal inference: one frame, carrying state. Zero state
    /// starts a clip.
    pub fn infer_temporal(
        &self,
        image: &Array3<f64>,
        raster: &Array3<f64>,
        state: Option<TemporalState>,
    ) -> Result<(RawPrediction, TemporalState)> {
        let state = state.unwrap_or_else(|| TemporalState::zeros(&self.cfg));
        let mut tape = Tape::new(&self.params);
        let img = tape.input(image.clone());
        let ras = tape.input(raster.clone());
        let h = tape.input(state.hidden);
        let c = tape.input(state.cell);
        let (nodes, (h_out, c_out)) = self.forward_temporal_step(&mut tape, img, ras, (h, c))?;
        let new_state = TemporalState {
            hidden: tape.value(h_out).clone(),
            cell: tape.value(c_out).clone(),
        };
        Ok((raw_values(&tape, &nodes), new_state))
    }

    /// Temporal inference over a whole clip (time-ordered frames), returning
    /// per-frame predictions and the final state.
    pub fn infer_clip(
        &self,
        frames: &[(Array3<f64>, Array3<f64>)],
        state: Option<TemporalState>,
    ) -> Result<(Vec<RawPrediction>, TemporalState)> {
        let mut state = state.unwrap_or_else(|| TemporalState::zeros(&self.cfg));
        let mut out = Vec::with_capacity(frames.len());
        for (image, raster) in frames {
            let (raw, next) = self.infer_temporal(image, raster, Some(state))?;
            out.push(raw);
            state = next;
        }
        Ok((out, state))
    }

    /// Fresh zeroed gradient buffers matching this model's parameters.
    pub fn grad_store(&self) -> GradStore {
        GradStore::zeros_like(&self.params)
    }
}

/// Extract the raw prediction tensors from tape nodes.
pub fn raw_values(tape: &Tape, nodes: &RawNodes) -> RawPrediction {
    RawPrediction {
        scales: nodes
            .raw
            .iter()
            .zip(SCALE_STRIDES.iter())
            .map(|(&n, &stride)| ScalePrediction {
                tensor: tape.value(n).clone(),
                stride,
            })
            .collect(),
    }
}

/// Normalize a byte image `[C, H, W]` to f64 in [0, 1].
pub fn to_input_tensor(bytes: &Array3<u8>) -> Array3<f64> {
    bytes.mapv(|v| v as f64 / 255.0)
}
