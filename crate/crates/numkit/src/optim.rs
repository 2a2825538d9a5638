//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{dim_err, NumError, Result};
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
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

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamMap,
    second: ParamMap,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: ParamMap::new(),
            second: ParamMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    /// Applies one update to every parameter that has a gradient.
    /// Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(NumError::Diverged(name.clone()));
            }
            match params.get(name) {
                Some(p) if p.same_shape(g) => {}
                Some(p) => {
                    return Err(dim_err(
                        "optimizer_step",
                        format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
                    ))
                }
                None => return Err(dim_err("optimizer_step", format!("unknown parameter `{name}`"))),
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
