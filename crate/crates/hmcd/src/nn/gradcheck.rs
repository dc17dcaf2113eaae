//! Central finite-difference gradient checking.
//!
//! These helpers perturb tensors coordinate by coordinate and compare the
//! numeric slope against an analytic gradient, reporting the worst relative
//! error. They are used by the test suites; they never feed the training
//! path.

use ndarray::{Array3, ArrayD};

use super::{ParamId, ParamStore};

/// Relative error between matching coordinates, floored so near-zero pairs
/// compare absolutely.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Central difference df/dx_i with a step scaled to the coordinate.
pub fn numeric_gradient<F: FnMut(&ArrayD<f64>) -> f64>(x: &ArrayD<f64>, mut f: F) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Check the analytic gradient of one parameter against finite differences
/// of `loss(params)`. Returns the worst relative error.
pub fn check_param_gradient<F: FnMut(&ParamStore) -> f64>(
    params: &mut ParamStore,
    id: ParamId,
    analytic: &ArrayD<f64>,
    mut loss: F,
) -> f64 {
    let original = params.get(id).clone();
    let numeric = {
        let mut probe_store = params.clone();
        numeric_gradient(&original, |t| {
            probe_store.get_mut(id).assign(t);
            loss(&probe_store)
        })
    };
    params.get_mut(id).assign(&original);
    max_rel_err(analytic, &numeric)
}

/// Check an analytic input gradient against finite differences of `loss(x)`.
pub fn check_input_gradient<F: FnMut(&ArrayD<f64>) -> f64>(
    x: &Array3<f64>,
    analytic: &ArrayD<f64>,
    loss: F,
) -> f64 {
    let numeric = numeric_gradient(&x.clone().into_dyn(), loss);
    max_rel_err(analytic, &numeric)
}

/// Check a subset of coordinates of one parameter (for large tensors).
/// `coords` are flat indices into the tensor.
pub fn check_param_gradient_sampled<F: FnMut(&ParamStore) -> f64>(
    params: &mut ParamStore,
    id: ParamId,
    analytic: &ArrayD<f64>,
    coords: &[usize],
    mut loss: F,
) -> f64 {
    let original = params.get(id).clone();
    let mut worst = 0.0f64;
    for &idx in coords {
        let orig = original.as_slice().unwrap()[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        let mut probe = params.clone();
        probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
        let fp = loss(&probe);
        probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
        let fm = loss(&probe);
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    params.get_mut(id).assign(&original);
    worst
}
