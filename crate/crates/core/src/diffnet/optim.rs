use serde::{Deserialize, Serialize};

use super::net::{ForwardTrace, NetParams};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }
}

/// Which flat coordinates an optimizer may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    trainable: Vec<bool>,
}

impl ParamMask {
    pub fn all_trainable(n_params: usize) -> Self {
        Self { trainable: vec![true; n_params] }
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.iter().filter(|t| **t).count()
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }
}

/// Mask that freezes every parameter of the listed layers.
pub fn freeze_mask(params: &NetParams, layers_to_freeze: &[usize]) -> Result<ParamMask> {
    let n_layers = params.n_layers();
    for &l in layers_to_freeze {
        ensure(l < n_layers, || format!("layer {l} out of range for a {n_layers}-layer net"))?;
    }
    let mut mask = ParamMask::all_trainable(params.n_params());
    for &l in layers_to_freeze {
        for i in params.layer_range(l) {
            mask.trainable[i] = false;
        }
    }
    if mask.n_trainable() == 0 {
        return Err(Error::InvalidArgument("freezing every layer leaves nothing trainable".into()));
    }
    Ok(mask)
}

/// Freezes all layers except the last `n_trainable` (head included).
pub fn freeze_all_but_last(params: &NetParams, n_trainable: usize) -> Result<ParamMask> {
    let n = params.n_layers();
    ensure(n_trainable >= 1, || "at least one layer must stay trainable".into())?;
    let frozen: Vec<usize> = (0..n.saturating_sub(n_trainable)).collect();
    freeze_mask(params, &frozen)
}

/// One bias-corrected Adam step. Masked coordinates and their moments are left untouched.
pub fn sgd_adam_step(
    params: &mut NetParams,
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    mask: Option<&ParamMask>,
) -> Result<()> {
    let n = params.n_params();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: grad.len() });
    }
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: mask.len() });
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i} is {}", grad[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let flat = params.flat_mut();
    for i in 0..n {
        if mask.is_some_and(|m| !m.trainable[i]) {
            continue;
        }
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        flat[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// L2 norm of the post-layernorm features at every layernorm site, in layer order.
pub fn feature_norms(trace: &ForwardTrace, params: &NetParams) -> Vec<f64> {
    params
        .topology()
        .layernorm_sites()
        .into_iter()
        .map(|i| trace.layers[i].post_ln.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::net::NetConfig;

    fn net() -> NetParams {
        let mut cfg = NetConfig::new(3, 1);
        cfg.width = 6;
        cfg.build(5).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = net();
        let before = p.clone();
        let mut st = AdamState::new(p.n_params());
        sgd_adam_step(&mut p, &vec![0.0; before.n_params()], &mut st, &AdamHyper::default(), None).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_by_hand() {
        // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        // Second step with the same g: same bias-corrected moments.
        let mut p = net();
        let n = p.n_params();
        let before = p.flat().to_vec();
        let mut grad = vec![0.0; n];
        grad[0] = 0.5;
        grad[1] = -2.0;
        let hyper = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
        let mut st = AdamState::new(n);
        sgd_adam_step(&mut p, &grad, &mut st, &hyper, None).unwrap();
        assert!((p.flat()[0] - (before[0] - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p.flat()[1] - (before[1] + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        let m = 0.1 * 0.5 * (1.0 + 0.9);
        let v: f64 = 0.01 * 0.25 * (1.0 + 0.99);
        let expected = p.flat()[0] - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.9801)).sqrt() + 1e-8);
        sgd_adam_step(&mut p, &grad, &mut st, &hyper, None).unwrap();
        assert!((p.flat()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut p = net();
        let mut grad = vec![0.0; p.n_params()];
        grad[3] = f64::NAN;
        let mut st = AdamState::new(p.n_params());
        assert!(matches!(sgd_adam_step(&mut p, &grad, &mut st, &AdamHyper::default(), None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn identical_runs_stay_identical() {
        let (mut a, mut b) = (net(), net());
        let (mut sa, mut sb) = (AdamState::new(a.n_params()), AdamState::new(b.n_params()));
        for k in 0..20 {
            let g = a.gradient(&[0.1 * k as f64, 1.0, -0.5], &[1.0]).unwrap();
            sgd_adam_step(&mut a, &g, &mut sa, &AdamHyper::default(), None).unwrap();
            let g = b.gradient(&[0.1 * k as f64, 1.0, -0.5], &[1.0]).unwrap();
            sgd_adam_step(&mut b, &g, &mut sb, &AdamHyper::default(), None).unwrap();
        }
        assert_eq!(a.flat(), b.flat());
    }

    #[test]
    fn freeze_masks() {
        let p = net();
        assert_eq!(freeze_mask(&p, &[]).unwrap().n_trainable(), p.n_params());
        assert!(freeze_mask(&p, &[0, 1, 2, 3]).is_err());
        assert!(freeze_mask(&p, &[7]).is_err());
        let m = freeze_all_but_last(&p, 2).unwrap();
        let trainable: usize = p.layer_range(2).len() + p.layer_range(3).len();
        assert_eq!(m.n_trainable(), trainable);
        for i in p.layer_range(0).chain(p.layer_range(1)) {
            assert!(!m.is_trainable(i));
        }
    }

    #[test]
    fn frozen_layers_survive_training() {
        let mut p = net();
        let mask = freeze_mask(&p, &[0, 1]).unwrap();
        let snapshot = p.clone();
        let mut st = AdamState::new(p.n_params());
        for k in 0..100 {
            let g = p.gradient(&[1.0, -(k as f64) * 0.01, 0.3], &[1.0]).unwrap();
            sgd_adam_step(&mut p, &g, &mut st, &AdamHyper { lr: 1e-2, ..Default::default() }, Some(&mask)).unwrap();
        }
        for l in 0..2 {
            assert_eq!(&p.flat()[p.layer_range(l)], &snapshot.flat()[snapshot.layer_range(l)]);
        }
        assert_ne!(&p.flat()[p.layer_range(3)], &snapshot.flat()[snapshot.layer_range(3)]);
    }

    #[test]
    fn unit_layernorm_feature_norm_is_sqrt_width() {
        let p = net();
        let (_, trace) = p.forward(&[0.4, -1.0, 2.0]).unwrap();
        let norms = feature_norms(&trace, &p);
        assert_eq!(norms.len(), 3);
        for n in norms {
            assert!((n - 6f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_scale_norm_is_shift_norm() {
        let mut layers = net().layers();
        for l in layers.iter_mut() {
            if let Some((scale, shift)) = l.norm.as_mut() {
                scale.fill(0.0);
                shift.iter_mut().enumerate().for_each(|(i, s)| *s = i as f64 - 2.0);
            }
        }
        let p = NetParams::from_layers(layers).unwrap();
        let (_, trace) = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        let shift_norm: f64 = (0..6).map(|i| (i as f64 - 2.0).powi(2)).sum::<f64>().sqrt();
        for n in feature_norms(&trace, &p) {
            assert!((n - shift_norm).abs() < 1e-12);
        }
    }
}
