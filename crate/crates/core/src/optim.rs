//! Bias-corrected adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// First/second moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u32,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], name: &str) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::FrozenUpdate(name.to_string()));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if params.get(id).shape() != g.shape() || self.m[id.0].shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{}`: parameter {:?}, gradient {:?}",
                        params.name(id),
                        params.get(id).shape(),
                        g.shape()
                    ),
                ));
            }
        }
        if self.step == i32::MAX as u32 {
            return Err(Error::invalid("optimizer step counter overflow"));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        for (id, g) in params.ids().zip(grads) {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to 10% of `base` at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = set();
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::zeros([3])], "w").unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps) ≈ lr * sign(g).
        let mut p = set();
        let mut st = AdamState::new(&p, AdamConfig::default().with_lr(0.01));
        let g = Tensor::from_f64([3], &[0.3, -4.0, 1e-3]).unwrap();
        st.step(&mut p, std::slice::from_ref(&g), "w").unwrap();
        let expect = [
            1.0 - 0.01 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.01 * 4.0 / (4.0 + 1e-8),
            0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in p.tensors()[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_and_mismatched_updates_fail() {
        let mut p = set();
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(
            st.step(&mut p, &[Tensor::zeros([2])], "w"),
            Err(Error::Shape { .. })
        ));
        p.set_frozen(true);
        assert!(matches!(
            st.step(&mut p, &[Tensor::zeros([3])], "w"),
            Err(Error::FrozenUpdate(_))
        ));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = set();
            let mut st = AdamState::new(&p, AdamConfig::default());
            for k in 0..10 {
                let g = Tensor::from_f64([3], &[k as f64 * 0.1, -0.2, 0.3]).unwrap();
                st.step(&mut p, &[g], "w").unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert!(a.tensors()[0].bits_eq(&b.tensors()[0]));
        assert_eq!(sa, sb);
    }
}
