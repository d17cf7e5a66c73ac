//! Adam with bias correction, two learning-rate groups and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::McanParams;

/// Parameters under this prefix use `lr_text`; all others use `lr_other`.
pub const TEXT_GROUP_PREFIX: &str = "enc.text.";

/// One Adam update of `param` in place. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adam", format!("param {n}, grad {}, m {}, v {}", grad.len(), m.len(), v.len())));
    }
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for i in 0..n {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: OptimConfig,
    step: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with(TEXT_GROUP_PREFIX) {
            self.cfg.lr_text
        } else {
            self.cfg.lr_other
        }
    }

    /// Applies the gradients stored on each parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut McanParams) -> Result<StepInfo> {
        let sq: f64 = params
            .iter()
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let clip = self.cfg.clip_norm;
        let clipped = clip > 0.0 && grad_norm > clip;
        let factor = if clipped { clip / grad_norm } else { 1.0 };
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let lrs: Vec<f64> = params.names().map(|n| self.lr_for(n)).collect();
        for ((name, p), lr) in params.iter_mut().zip(lrs) {
            let n = p.numel();
            let grad: Vec<f64> = match p.grad.as_ref() {
                Some(g) => g.data().iter().map(|x| x * factor).collect(),
                None => vec![0.0; n],
            };
            let (m, v) = self.state.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adam_update(p.data_mut(), &grad, m, v, t, lr, b1, b2, eps)?;
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}
