//! AdamW with decoupled weight decay and inspectable, serializable moments.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::{DType, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter so far.
    pub steps: u64,
}

/// One named parameter taking part in an update.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub var: &'a Var,
    pub lr_mult: f64,
}

pub struct AdamW {
    config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// weight decay included.
    pub fn step(&mut self, params: &[ParamRef], grads: &GradStore) -> Result<()> {
        let c = self.config;
        for p in params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let theta = p.var.as_tensor();
            let entry = match self.state.remove(p.name) {
                Some(s) => s,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = entry.steps + 1;
            let m = ((entry.m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?).detach();
            let v = ((entry.v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?).detach();
            let lr = c.lr * p.lr_mult;
            let bc1 = 1.0 - c.beta1.powi(steps as i32);
            let bc2 = 1.0 - c.beta2.powi(steps as i32);
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = theta.affine(1.0 - lr * c.weight_decay, 0.0)?;
            let next = (decayed - update.affine(lr, 0.0)?)?.detach();
            p.var.set(&next)?;
            self.state.insert(p.name.to_string(), Moments { m, v, steps });
        }
        Ok(())
    }
}

/// Euclidean norm over the gradients of `vars` (missing gradients count as 0).
pub fn grad_norm<'a>(vars: impl IntoIterator<Item = &'a Var>, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales every gradient in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<'a>(vars: &[&'a Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(vars.iter().copied(), grads)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), g.affine(scale, 0.0)?);
            }
        }
    }
    Ok(norm)
}
