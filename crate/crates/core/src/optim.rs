//! Nadam and the cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NadamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamHyper {
    fn default() -> Self {
        NadamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl NadamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid Nadam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub moments: BTreeMap<String, Moments>,
    pub t: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Nadam update on flat slices at (1-based) step `t`.
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr / (sqrt(v / (1 - b2^t)) + eps)
///                 * (b1 m / (1 - b1^t) + (1 - b1) g / (1 - b1^t))
/// ```
pub fn nadam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &NadamHyper,
    lr: f64,
) {
    let NadamHyper {
        beta1: b1,
        beta2: b2,
        eps,
        ..
    } = *hyper;
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr / (v_hat.sqrt() + eps) * (b1 * m_hat + (1.0 - b1) * g / bc1);
    }
}

/// Applies one Nadam step to every parameter that has a gradient.
/// Parameters without a gradient keep their moments and value.
pub fn nadam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    hyper: &NadamHyper,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient passed to nadam_step"));
        }
    }
    state.t += 1;
    let t = state.t;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: p.zeros_like(),
            v: p.zeros_like(),
        });
        nadam_update(
            p.data_mut(),
            g.data(),
            mom.m.data_mut(),
            mom.v.data_mut(),
            t,
            hyper,
            lr,
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            lr_max: 0.001,
            lr_min: 1e-5,
            total_steps: 1,
        }
    }
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min < self.lr_max && self.total_steps >= 1 && self.lr_min >= 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid cosine schedule {self:?}")))
        }
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`; steps past `T`
/// stay at `lr_min`.
pub fn cosine_lr(t: u64, sched: &CosineSchedule) -> f64 {
    if t == 0 {
        return sched.lr_max;
    }
    if t >= sched.total_steps {
        return sched.lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / sched.total_steps as f64;
    sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + phase.cos())
}
