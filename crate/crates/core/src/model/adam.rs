use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, skipped for biases and layer-norm parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".ln."))
}

/// One bias-corrected Adam update. Gradients are checked for NaN/Inf before
/// any parameter changes.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step_filtered(params, grads, state, lr, cfg, |_| true)
}

/// [`adam_step`] restricted to arrays accepted by `trainable`; the others and
/// their moments are left untouched.
pub fn adam_step_filtered<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if grads.arrays.len() != params.arrays.len() || state.m.arrays.len() != params.arrays.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (p, g) in params.arrays.iter().zip(&grads.arrays) {
        if p.data.len() != g.data.len() {
            return Err(Error::Shape(format!("gradient for {} has wrong size", p.name)));
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .arrays
        .iter_mut()
        .zip(&grads.arrays)
        .zip(&mut state.m.arrays)
        .zip(&mut state.v.arrays)
    {
        if !trainable(&p.name) {
            continue;
        }
        let wd = if decays(&p.name) { cfg.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i].f64();
            let mi = cfg.beta1 * m.data[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = T::c(mi);
            v.data[i] = T::c(vi);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + wd * p.data[i].f64();
            p.data[i] = T::c(p.data[i].f64() - lr * update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Array;

    fn set(name: &str, v: Vec<f64>) -> ParamSet<f64> {
        ParamSet {
            arrays: vec![Array {
                name: name.into(),
                shape: vec![v.len()],
                data: v,
            }],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.3, -2.0, 1e-2] {
            let mut p = set("w", vec![1.0]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &set("w", vec![g]), &mut st, 1e-3, &cfg).unwrap();
            let delta = (p.arrays[0].data[0] - 1.0).abs();
            let want = 1e-3 * g.abs() / (g.abs() + 1e-6);
            assert!((delta - want).abs() < 1e-15);
            assert!((delta - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = set("x.bias", vec![0.5, -0.25]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &set("x.bias", vec![0.0, 0.0]), &mut st, 1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(p.arrays[0].data, vec![0.5, -0.25]);
    }

    #[test]
    fn non_finite_names_array() {
        let mut p = set("layer.0.w", vec![1.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &set("layer.0.w", vec![f64::NAN]), &mut st, 1e-3, &AdamConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("layer.0.w"));
        assert_eq!(p.arrays[0].data, vec![1.0]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = set("w", vec![0.1, 0.2, 0.3]);
            let mut st = AdamState::new(&p);
            for k in 0..10 {
                let g = set("w", vec![0.01 * k as f64, -0.3, 1.5]);
                adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
