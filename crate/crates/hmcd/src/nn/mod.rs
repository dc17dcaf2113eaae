//! A minimal reverse-mode autodiff engine over `[C, H, W]` f64 tensors.
//!
//! The network graph is recorded on a [`Tape`]: activations are nodes,
//! parameters live in a [`ParamStore`] referenced by id. Calling
//! [`Tape::backward`] with gradient seeds walks the tape in reverse and
//! accumulates parameter gradients into a [`GradStore`]. Everything is f64
//! and single-threaded per tape, so results are bit-reproducible; batching
//! parallelizes across tapes.

pub mod conv;
pub mod gradcheck;

use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn view4(&self, id: ParamId) -> Result<ndarray::ArrayView4<'_, f64>> {
        self.tensors[id.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::shape(format!("parameter {} is not 4-d", self.name(id))))
    }

    fn view1(&self, id: ParamId) -> Result<ndarray::ArrayView1<'_, f64>> {
        self.tensors[id.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::shape(format!("parameter {} is not 1-d", self.name(id))))
    }
}

/// Per-parameter gradient accumulators with the same layout as a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    tensors: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            tensors: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    /// Accumulate another gradient store (summed in caller-fixed order).
    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            *t *= k;
        }
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Elu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    SliceC {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Upsample2x {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
}

/// Records the forward graph and replays it in reverse for gradients.
pub struct Tape<'p> {
    params: &'p ParamStore,
    ops: Vec<Op>,
    values: Vec<Array3<f64>>,
    grads: Option<Vec<Option<Array3<f64>>>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            ops: Vec::new(),
            values: Vec::new(),
            grads: None,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array3<f64> {
        &self.values[id.0]
    }

    /// Gradient w.r.t. a node, available after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Array3<f64>> {
        self.grads.as_ref().and_then(|g| g[id.0].as_ref())
    }

    fn push(&mut self, op: Op, value: Array3<f64>) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        NodeId(self.values.len() - 1)
    }

    pub fn input(&mut self, value: Array3<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let wv = self.params.view4(w)?;
        let (_, cin, k, k2) = wv.dim();
        if k != k2 {
            return Err(Error::shape("conv kernels must be square".to_string()));
        }
        let xv = &self.values[x.0];
        if xv.dim().0 != cin {
            return Err(Error::shape(format!(
                "conv {} expects {cin} input channels, got {}",
                self.params.name(w),
                xv.dim().0
            )));
        }
        let bv = match b {
            Some(id) => Some(self.params.view1(id)?.to_owned()),
            None => None,
        };
        let y = conv::conv2d_forward(xv, wv, bv.as_ref(), stride, pad);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, y))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y = self.values[x.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { x, slope }, y)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let y = self.values[x.0].mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(Op::Elu { x }, y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.values[x.0].mapv(sigmoid_scalar);
        self.push(Op::Sigmoid { x }, y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.values[x.0].mapv(f64::tanh);
        self.push(Op::Tanh { x }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let y = &self.values[a.0] + &self.values[b.0];
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let y = &self.values[a.0] - &self.values[b.0];
        Ok(self.push(Op::Sub { a, b }, y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let y = &self.values[a.0] * &self.values[b.0];
        Ok(self.push(Op::Mul { a, b }, y))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.values[a.0].dim();
        let (cb, hb, wb) = self.values[b.0].dim();
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut y = Array3::zeros((ca + cb, ha, wa));
        y.slice_mut(ndarray::s![..ca, .., ..])
            .assign(&self.values[a.0]);
        y.slice_mut(ndarray::s![ca.., .., ..])
            .assign(&self.values[b.0]);
        Ok(self.push(Op::ConcatC { a, b }, y))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (c, _, _) = self.values[x.0].dim();
        if start + len > c {
            return Err(Error::shape(format!(
                "slice [{start}, {}) out of {c} channels",
                start + len
            )));
        }
        let y = self.values[x.0]
            .slice(ndarray::s![start..start + len, .., ..])
            .to_owned();
        Ok(self.push(Op::SliceC { x, start, len }, y))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.values[x.0].dim();
        let mut y = Array3::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = self.values[x.0][(ci, i, j)];
                    y[(ci, 2 * i, 2 * j)] = v;
                    y[(ci, 2 * i, 2 * j + 1)] = v;
                    y[(ci, 2 * i + 1, 2 * j)] = v;
                    y[(ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
        self.push(Op::Upsample2x { x }, y)
    }

    /// Layer normalization over all elements of the tensor (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.values[x.0];
        let n = xv.len() as f64;
        let mean = xv.sum() / n;
        let var = xv.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let y = xv.mapv(|v| (v - mean) * inv_std);
        self.push(Op::LayerNorm { x, eps }, y)
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.values[a.0].dim() != self.values[b.0].dim() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.values[a.0].dim(),
                self.values[b.0].dim()
            )));
        }
        Ok(())
    }

    /// Reverse pass. `seeds` are (node, dL/dnode) pairs; parameter gradients
    /// accumulate into `grads`.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Array3<f64>)>, grads: &mut GradStore) -> Result<()> {
        let mut g: Vec<Option<Array3<f64>>> = vec![None; self.values.len()];
        for (node, seed) in seeds {
            if seed.dim() != self.values[node.0].dim() {
                return Err(Error::shape(format!(
                    "seed shape {:?} does not match node {:?}",
                    seed.dim(),
                    self.values[node.0].dim()
                )));
            }
            accumulate(&mut g[node.0], seed);
        }

        for idx in (0..self.ops.len()).rev() {
            let Some(gy) = g[idx].take() else { continue };
            match self.ops[idx].clone() {
                Op::Input => {
                    // Keep the gradient visible for callers (e.g. FD checks).
                    g[idx] = Some(gy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let wv = self.params.view4(w)?;
                    let gw = grads.tensors[w.0]
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .map_err(|_| Error::shape("conv grad tensor is not 4-d"))?;
                    // Work on owned buffers, then copy back.
                    let mut gw_own: Array4<f64> = gw.to_owned();
                    let gx = if let Some(bid) = b {
                        let mut gb_own: Array1<f64> = grads.tensors[bid.0]
                            .view()
                            .into_dimensionality::<ndarray::Ix1>()
                            .map_err(|_| Error::shape("bias grad tensor is not 1-d"))?
                            .to_owned();
                        let gx = conv::conv2d_backward(
                            &self.values[x.0],
                            wv,
                            &gy,
                            stride,
                            pad,
                            &mut gw_own,
                            Some(&mut gb_own),
                        );
                        grads.tensors[bid.0].assign(&gb_own.into_dyn());
                        gx
                    } else {
                        conv::conv2d_backward(
                            &self.values[x.0],
                            wv,
                            &gy,
                            stride,
                            pad,
                            &mut gw_own,
                            None,
                        )
                    };
                    grads.tensors[w.0].assign(&gw_own.into_dyn());
                    accumulate(&mut g[x.0], gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = ndarray::Zip::from(&gy)
                        .and(&self.values[x.0])
                        .map_collect(|&gyv, &xv| if xv > 0.0 { gyv } else { slope * gyv });
                    accumulate(&mut g[x.0], gx);
                }
                Op::Elu { x } => {
                    let gx = ndarray::Zip::from(&gy)
                        .and(&self.values[x.0])
                        .map_collect(|&gyv, &xv| if xv > 0.0 { gyv } else { gyv * xv.exp() });
                    accumulate(&mut g[x.0], gx);
                }
                Op::Sigmoid { x } => {
                    let gx = ndarray::Zip::from(&gy)
                        .and(&self.values[idx])
                        .map_collect(|&gyv, &yv| gyv * yv * (1.0 - yv));
                    accumulate(&mut g[x.0], gx);
                }
                Op::Tanh { x } => {
                    let gx = ndarray::Zip::from(&gy)
                        .and(&self.values[idx])
                        .map_collect(|&gyv, &yv| gyv * (1.0 - yv * yv));
                    accumulate(&mut g[x.0], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut g[a.0], gy.clone());
                    accumulate(&mut g[b.0], gy);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut g[a.0], gy.clone());
                    accumulate(&mut g[b.0], -gy);
                }
                Op::Mul { a, b } => {
                    let ga = &gy * &self.values[b.0];
                    let gb = &gy * &self.values[a.0];
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::ConcatC { a, b } => {
                    let ca = self.values[a.0].dim().0;
                    let ga = gy.slice(ndarray::s![..ca, .., ..]).to_owned();
                    let gb = gy.slice(ndarray::s![ca.., .., ..]).to_owned();
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::SliceC { x, start, len } => {
                    let mut gx = Array3::zeros(self.values[x.0].dim());
                    gx.slice_mut(ndarray::s![start..start + len, .., ..])
                        .assign(&gy);
                    accumulate(&mut g[x.0], gx);
                }
                Op::Upsample2x { x } => {
                    let (c, h, w) = self.values[x.0].dim();
                    let mut gx = Array3::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[(ci, i, j)] = gy[(ci, 2 * i, 2 * j)]
                                    + gy[(ci, 2 * i, 2 * j + 1)]
                                    + gy[(ci, 2 * i + 1, 2 * j)]
                                    + gy[(ci, 2 * i + 1, 2 * j + 1)];
                            }
                        }
                    }
                    accumulate(&mut g[x.0], gx);
                }
                Op::LayerNorm { x, eps } => {
                    let xv = &self.values[x.0];
                    let n = xv.len() as f64;
                    let mean = xv.sum() / n;
                    let var = xv.mapv(|v| (v - mean) * (v - mean)).sum() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let y = &self.values[idx];
                    let g_mean = gy.sum() / n;
                    let gy_dot_y = (&gy * y).sum() / n;
                    let gx = ndarray::Zip::from(&gy)
                        .and(y)
                        .map_collect(|&gv, &yv| inv_std * (gv - g_mean - yv * gy_dot_y));
                    accumulate(&mut g[x.0], gx);
                }
            }
        }
        self.grads = Some(g);
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid, clamped away from 0 and 1.
pub fn logit_scalar(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

// ---------------------------------------------------------------------------
// Initialization

/// He (fan-in) normal initialization for a conv weight `[Cout, Cin, k, k]`.
pub fn he_conv_init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> ArrayD<f64> {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut t = ArrayD::zeros(IxDyn(&[cout, cin, k, k]));
    for v in t.iter_mut() {
        *v = normal_sample(rng) * std;
    }
    t
}

pub fn zeros_init(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Standard normal via Box-Muller on the ChaCha stream.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
