//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
pub struct AdamState<F: Scalar> {
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = |p: &ParamSet<F>| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One optimizer step. A non-finite gradient aborts before any parameter
/// is touched and reports the offending tensor by name.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &GradMap<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter {name}; step aborted"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let one = F::one();
    let corr1 = F::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = F::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = F::from_f64(cfg.lr);
    let eps = F::from_f64(cfg.eps);

    for (name, g) in grads {
        let m = state
            .m
            .get_mut(name)
            .unwrap_or_else(|| panic!("adam state missing {name}"));
        let v = state.v.get_mut(name).unwrap();
        let p = params.get_mut(name);
        assert_eq!(p.numel(), g.numel(), "gradient shape mismatch for {name}");
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / corr1;
            let vhat = vi / corr2;
            p.data_mut()[i] = p.data()[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad_of(value: f64) -> GradMap<f64> {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::scalar(value));
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = one_param(1.25);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad_of(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").item(), 1.25);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        for g in [0.5, -3.0, 1e-3] {
            let mut p = one_param(0.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &grad_of(g), &mut st, &cfg).unwrap();
            // bias-corrected first step: lr * g / (|g| + eps)
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get("w").item() - expected).abs() < 1e-12);
            assert!((p.get("w").item().abs() - cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_fixed_point() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut p = one_param(0.75);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &grad_of(2.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("w").item(), 0.75);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = one_param(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &grad_of(f64::NAN), &mut st, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(p.get("w").item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut p = one_param(0.3);
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig::default();
            let mut trace = Vec::new();
            for i in 0..10 {
                adam_step(&mut p, &grad_of(0.1 * i as f64 - 0.2), &mut st, &cfg).unwrap();
                trace.push(p.get("w").item().to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
