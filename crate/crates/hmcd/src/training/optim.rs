//! Parameter-space optimizers over the flat parameter store.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    step: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f64>> = params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        match self.kind {
            OptimKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for (idx, g) in grads.tensors().iter().enumerate() {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    ndarray::Zip::from(m).and(g).for_each(|m, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                    });
                    ndarray::Zip::from(v).and(g).for_each(|v, &g| {
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    });
                    let p = params.get_mut(crate::nn::ParamId(idx));
                    ndarray::Zip::from(p)
                        .and(&self.m[idx])
                        .and(&self.v[idx])
                        .for_each(|p, &m, &v| {
                            let mhat = m / bc1;
                            let vhat = v / bc2;
                            *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                        });
                }
            }
            OptimKind::SgdMomentum => {
                for (idx, g) in grads.tensors().iter().enumerate() {
                    let m = &mut self.m[idx];
                    ndarray::Zip::from(m).and(g).for_each(|m, &g| {
                        *m = MOMENTUM * *m + g;
                    });
                    let p = params.get_mut(crate::nn::ParamId(idx));
                    ndarray::Zip::from(p).and(&self.m[idx]).for_each(|p, &m| {
                        *p -= self.lr * m;
                    });
                }
            }
        }
    }
}
