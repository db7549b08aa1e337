//! Student-only generation: deterministic DDIM with classifier-free guidance.
//!
//! The unconditional pass keeps the mask features and swaps only the context
//! vector for its null embedding, so structural control survives guidance.

use candle::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::model::DualBranchModel;
use crate::nn::init_rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSpacing {
    /// Uniform stride from `T` down to 1.
    #[default]
    UniformTrailing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub timestep_spacing: TimestepSpacing,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            cfg_scale: 9.0,
            eta: 0.0,
            seed: 0,
            timestep_spacing: TimestepSpacing::UniformTrailing,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.len() {
            return Err(Error::invalid(
                "sampler.num_steps",
                format!("must lie in [1, {}]", schedule.len()),
            ));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid("sampler.cfg_scale", "must be non-negative"));
        }
        if self.eta != 0.0 {
            return Err(Error::invalid("sampler.eta", "only deterministic sampling (eta = 0) is supported"));
        }
        Ok(())
    }
}

/// `eps_u + scale * (eps_c - eps_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    check_shape("cfg_combine", eps_uncond.dims(), eps_cond.dims())?;
    if !(scale >= 0.0) {
        return Err(Error::invalid("cfg_scale", "must be non-negative"));
    }
    // The endpoints are returned as-is so the collapse identities hold exactly.
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(scale, 0.0)?)?)
}

/// One deterministic DDIM update from `t` to `t_prev` (`t_prev = 0` yields the
/// clean estimate).
pub fn ddim_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_shape("ddim_step", x_t.dims(), eps_hat.dims())?;
    if t_prev >= t {
        return Err(Error::invalid("t_prev", format!("must be below t ({t_prev} >= {t})")));
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar_or_one(t_prev)?;
    let x0_hat = (x_t - eps_hat.affine((1.0 - a_t).sqrt(), 0.0)?)?.affine(1.0 / a_t.sqrt(), 0.0)?;
    Ok((x0_hat.affine(a_prev.sqrt(), 0.0)? + eps_hat.affine((1.0 - a_prev).sqrt(), 0.0)?)?)
}

/// The `steps` visited timesteps, descending from `t_max` to 1.
pub fn timesteps(t_max: usize, steps: usize, spacing: TimestepSpacing) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::invalid("sampler.num_steps", format!("must lie in [1, {t_max}]")));
    }
    match spacing {
        TimestepSpacing::UniformTrailing => {
            if steps == 1 {
                return Ok(vec![t_max]);
            }
            let (span, div) = (t_max - 1, steps - 1);
            // Round-half-up of i * span / div in integers.
            Ok((0..steps).map(|i| t_max - (2 * i * span + div) / (2 * div)).collect())
        }
    }
}

/// Starting noise for output slot `index`; independent of batch composition.
pub fn initial_noise(seed: u64, index: usize, shape: (usize, usize, usize)) -> Vec<f32> {
    let mut rng = init_rng(seed ^ 0x5A3F_1E00, index as u64);
    (0..shape.0 * shape.1 * shape.2)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Generates one image per mask in `masks` (`[B, 1, H, W]`); slot `b` draws its
/// starting noise as output index `first_index + b`.
pub fn sample_indexed(
    model: &DualBranchModel,
    masks: &Tensor,
    first_index: usize,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    config.validate(schedule)?;
    let cfg = model.config();
    let n = masks.dim(0)?;
    let shape = (cfg.channels, cfg.resolution, cfg.resolution);
    let dev = model.device();
    let init: Vec<Tensor> = (0..n)
        .map(|b| Tensor::from_vec(initial_noise(config.seed, first_index + b, shape), shape, dev))
        .collect::<candle::Result<_>>()?;
    let mut x = Tensor::stack(&init, 0)?.to_dtype(model.dtype())?;
    let c_m = model.encode_mask_condition(masks)?;
    let on = vec![true; n];
    let off = vec![false; n];
    let ladder = timesteps(schedule.len(), config.num_steps, config.timestep_spacing)?;
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = ladder.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; n];
        let eps_c = model.predict_student_with(&x, &ts, &on, Some(&c_m))?;
        let eps_u = model.predict_student_with(&x, &ts, &off, Some(&c_m))?;
        let eps = cfg_combine(&eps_u, &eps_c, config.cfg_scale)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?.detach();
    }
    if x.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?.is_nan() {
        return Err(Error::NonFinite("sampled image".into()));
    }
    Ok(x.clamp(-1.0, 1.0)?)
}

pub fn sample(model: &DualBranchModel, masks: &Tensor, config: &SamplerConfig, schedule: &NoiseSchedule) -> Result<Tensor> {
    sample_indexed(model, masks, 0, config, schedule)
}
