//! Variance-preserving forward process shared by both branches and the sampler.
//!
//! Timesteps are 1-based everywhere in the public API (`t` in `1..=T`). The
//! sampler additionally uses `t = 0` as the clean endpoint with `alpha_bar = 1`.

use candle::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule.steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::invalid("schedule.beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid("schedule.beta_end", "must lie in (0, 1)"));
        }
        if beta_start > beta_end {
            return Err(Error::invalid("schedule.beta_start", "must not exceed beta_end"));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary per-step betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule.steps", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("schedule.betas", format!("{b} is outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Timestep { t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `alpha_bar` extended with `alpha_bar(0) = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * epsilon`.
    pub fn forward_corrupt(&self, x0: &Tensor, t: usize, epsilon: &Tensor) -> Result<CorruptedSample> {
        check_shape("forward_corrupt", x0.dims(), epsilon.dims())?;
        let (signal, noise) = self.coefficients(t)?;
        let x_t = (x0.affine(signal, 0.0)? + epsilon.affine(noise, 0.0)?)?;
        Ok(CorruptedSample {
            x_t,
            epsilon: epsilon.clone(),
            t,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CorruptedSample {
    pub x_t: Tensor,
    pub epsilon: Tensor,
    pub t: usize,
}

/// Maps images into the space the diffusion model operates in.
pub trait Codec {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

/// Pixel-space diffusion: `z0 = x0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}
