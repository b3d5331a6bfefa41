use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::{all_finite, ParamSet, Real};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

struct Moments<F> {
    m: Array2<F>,
    v: Array2<F>,
    step: i32,
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily per
/// parameter name.
pub struct AdamW<F: Real> {
    pub config: AdamWConfig,
    state: HashMap<String, Moments<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Updates every parameter that has a gradient and whose name passes
    /// `trainable`. Non-finite gradients abort before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &Gradients<F>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if trainable(name) && !all_finite(g) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let c = &self.config;
        let lr = F::of(c.lr);
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let eps = F::of(c.eps);
        let decay = F::one() - lr * F::of(c.weight_decay);
        for (name, g) in grads.iter() {
            if !trainable(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else {
                return Err(Error::MissingTensor(name.clone()));
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(p.dim()),
                v: Array2::zeros(p.dim()),
                step: 0,
            });
            st.step += 1;
            let bc1 = F::one() - b1.powi(st.step);
            let bc2 = F::one() - b2.powi(st.step);
            ndarray::Zip::from(&mut *p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p = *p * decay;
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(p: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", array![[p]]);
        ps
    }

    fn grad(g: f64) -> Gradients<f64> {
        let mut gs = Gradients::default();
        gs.insert("w", array![[g]]);
        gs
    }

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut ps = single(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut ps, &grad(0.0), |_| true).unwrap();
        }
        assert_eq!(ps.get("w").unwrap()[[0, 0]], 0.7);
    }

    #[test]
    fn zero_grads_with_decay_shrink_geometrically() {
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.5, ..Default::default() };
        let mut ps = single(2.0);
        let mut opt = AdamW::new(cfg.clone());
        opt.step(&mut ps, &grad(0.0), |_| true).unwrap();
        let expected = 2.0 * (1.0 - cfg.lr * cfg.weight_decay);
        assert!((ps.get("w").unwrap()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_computed_recurrence() {
        let (lr, b1, b2, eps, wd) = (1e-3_f64, 0.9_f64, 0.999_f64, 1e-8_f64, 0.1_f64);
        let cfg = AdamWConfig { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut ps = single(1.5);
        let mut opt = AdamW::new(cfg);
        let gs = [0.4, -0.25];
        for g in gs {
            opt.step(&mut ps, &grad(g), |_| true).unwrap();
        }
        // Textbook AdamW, written out long-hand.
        let mut p = 1.5_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for (t, g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            p *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert_eq!(ps.get("w").unwrap()[[0, 0]].to_bits(), p.to_bits());
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut ps = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut ps, &grad(f64::NAN), |_| true).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(ps.get("w").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut ps = single(1.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut ps, &grad(1.0), |n| n != "w").unwrap();
        assert_eq!(ps.get("w").unwrap()[[0, 0]], 1.0);
    }
}
