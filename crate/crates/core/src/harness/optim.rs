//! AdamW with decoupled weight decay and a learning-rate multiplier for
//! injected parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Origin, ParamStore};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-4
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Moments for every parameter of one store, indexed like the store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    /// Multiplier on `lr` for origin = delta parameters.
    pub delta_lr_multiplier: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, hyper: AdamWConfig, delta_lr_multiplier: f64) -> Result<Self> {
        hyper.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Ok(Self {
            hyper,
            delta_lr_multiplier,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    pub fn group_lr(&self, origin: Origin) -> f64 {
        match origin {
            Origin::Delta => self.hyper.lr * self.delta_lr_multiplier,
            Origin::Pretrained | Origin::Head => self.hyper.lr,
        }
    }
}

/// One AdamW update of every trainable parameter in `store`. Frozen
/// parameters are never read or written.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidConfig(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let AdamWConfig { betas: (b1, b2), eps, weight_decay, .. } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let lr = state.group_lr(p.origin);
        let grad = p.grad.as_ref().expect("checked above");
        let decay = 1.0 - lr * weight_decay;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *w *= decay;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
