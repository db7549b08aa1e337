//! Lesion-aware weight maps and the three loss terms of the composite objective.
//!
//! Lesion pixels get weight `N_lesion_free / N_total`, background pixels get
//! `N_lesion / N_total`, so the rarer region dominates the distillation term.

use candle::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rescale both region weights so the spatial mean is 1.
    #[default]
    MeanOne,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeightMap {
    pub weights: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub n_lesion: usize,
    pub n_lesion_free: usize,
    pub n_total: usize,
    pub normalization: Normalization,
}

impl AdaptiveWeightMap {
    /// All-ones map; turns the distillation term into plain MSE.
    pub fn uniform(mask: &Mask) -> Self {
        let n_lesion = mask.count();
        Self {
            weights: vec![1.0; mask.len()],
            height: mask.height(),
            width: mask.width(),
            n_lesion,
            n_lesion_free: mask.len() - n_lesion,
            n_total: mask.len(),
            normalization: Normalization::None,
        }
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.n_total as f64
    }

    /// Pre-normalization region weights `(lesion, background)`.
    pub fn raw_region_weights(&self) -> (f64, f64) {
        let total = self.n_total as f64;
        (self.n_lesion_free as f64 / total, self.n_lesion as f64 / total)
    }

    /// Stack maps into a `[B, 1, H, W]` tensor.
    pub fn batch_tensor(maps: &[AdaptiveWeightMap], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = maps.first().ok_or_else(|| Error::invalid("weight maps", "empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut values = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            check_shape("weight map batch", &[h, w], &[m.height, m.width])?;
            values.extend_from_slice(&m.weights);
        }
        Ok(Tensor::from_vec(values, (maps.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Per-pixel adaptive weights from the mask's lesion/background pixel counts.
///
/// All-lesion and all-background masks fall back to uniform weight 1.
pub fn compute_weight_map(mask: &Mask, normalization: Normalization) -> AdaptiveWeightMap {
    let n_total = mask.len();
    let n_lesion = mask.count();
    let n_lesion_free = n_total - n_lesion;
    if n_lesion == 0 || n_lesion_free == 0 {
        return AdaptiveWeightMap {
            normalization,
            ..AdaptiveWeightMap::uniform(mask)
        };
    }
    let total = n_total as f64;
    let mut lesion_w = n_lesion_free as f64 / total;
    let mut background_w = n_lesion as f64 / total;
    if normalization == Normalization::MeanOne {
        let p = n_lesion as f64 / total;
        let mean = 2.0 * p * (1.0 - p);
        lesion_w /= mean;
        background_w /= mean;
    }
    let weights = mask
        .data()
        .iter()
        .map(|&v| if v == 1 { lesion_w } else { background_w })
        .collect();
    AdaptiveWeightMap {
        weights,
        height: mask.height(),
        width: mask.width(),
        n_lesion,
        n_lesion_free,
        n_total,
        normalization,
    }
}

fn mse(pred: &Tensor, target: &Tensor, context: &'static str) -> Result<Tensor> {
    check_shape(context, target.dims(), pred.dims())?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean squared error of the student's noise prediction.
pub fn loss_student(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    mse(eps_pred, eps_true, "loss_student")
}

/// Mean squared error of the teacher's noise prediction.
pub fn loss_teacher(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    mse(eps_pred, eps_true, "loss_teacher")
}

/// `mean(w * (eps_s - sg(eps_t))^2)` with `weights` of shape `[B, 1, H, W]`
/// broadcast over channels. The teacher prediction is detached here, so no
/// gradient from this term can reach the teacher.
pub fn loss_adaptive_distill(eps_student: &Tensor, eps_teacher: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check_shape("loss_adaptive_distill", eps_student.dims(), eps_teacher.dims())?;
    let (b, _, h, w) = eps_student.dims4()?;
    check_shape("loss_adaptive_distill weights", &[b, 1, h, w], weights.dims())?;
    let min = weights.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min < 0.0 {
        return Err(Error::invalid("weight map", "weights must be non-negative"));
    }
    let diff = (eps_student - eps_teacher.detach())?.sqr()?;
    Ok(diff.broadcast_mul(weights)?.mean_all()?)
}

/// `l_s + l_t + lambda * l_ada`; rejects non-finite terms.
pub fn loss_total(l_s: &Tensor, l_t: &Tensor, l_ada: &Tensor, lambda_ada: f64) -> Result<Tensor> {
    if !(lambda_ada >= 0.0 && lambda_ada.is_finite()) {
        return Err(Error::invalid("lambda_ada", "must be finite and non-negative"));
    }
    for (name, v) in [("l_s", l_s), ("l_t", l_t), ("l_ada", l_ada)] {
        let x = v.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {x}")));
        }
    }
    Ok(((l_s + l_t)? + l_ada.affine(lambda_ada, 0.0)?)?)
}
