//! Segmentation metrics, a small reference segmenter, Fréchet distance between
//! fitted Gaussians, and mask-lesion alignment of generated images.

use std::path::Path;

use candle::{DType, Device, Module, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::MaskImagePair;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{init_rng, Conv, Init, ParamStore, ResBlock};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, ParamRef};
use crate::trainer::batch_indices;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegMetrics {
    pub m_dice: f64,
    pub m_iou: f64,
    pub accuracy: f64,
    pub recall: f64,
}

/// Metrics of a single prediction/truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub recall: f64,
}

pub fn image_metrics(pred: &Mask, truth: &Mask) -> Result<ImageMetrics> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape {
            context: "seg_metrics mask pair",
            expected: vec![truth.height(), truth.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let union = tp + fp + fn_;
    // Both empty counts as a perfect match.
    let (dice, iou) = if union == 0 {
        (1.0, 1.0)
    } else {
        (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / union as f64)
    };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(ImageMetrics {
        dice,
        iou,
        accuracy: (tp + tn) as f64 / pred.len() as f64,
        recall,
    })
}

/// Per-image metrics averaged over the list.
pub fn seg_metrics(pred: &[Mask], truth: &[Mask]) -> Result<SegMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            context: "seg_metrics list lengths",
            expected: vec![truth.len()],
            actual: vec![pred.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("seg_metrics", "needs at least one mask pair"));
    }
    let per = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| image_metrics(p, t))
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(SegMetrics {
        m_dice: avg(|m| m.dice),
        m_iou: avg(|m| m.iou),
        accuracy: avg(|m| m.accuracy),
        recall: avg(|m| m.recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub base_width: usize,
    pub levels: usize,
    pub max_groups: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Probability threshold for a lesion pixel.
    pub threshold: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            levels: 2,
            max_groups: 8,
            steps: 400,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            threshold: 0.5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.levels == 0 || self.max_groups == 0 || self.batch_size == 0 {
            return Err(Error::invalid("eval.segmenter", "widths, levels and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("eval.segmenter.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("eval.segmenter.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Small U-Net producing one lesion logit per pixel.
pub struct Segmenter {
    config: SegConfig,
    channels: usize,
    resolution: usize,
    params: ParamStore,
    conv_in: Conv,
    down_blocks: Vec<ResBlock>,
    downs: Vec<Conv>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    conv_out: Conv,
}

impl Segmenter {
    pub fn new(config: &SegConfig, channels: usize, resolution: usize, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        if resolution % (1 << (config.levels - 1)) != 0 {
            return Err(Error::invalid("eval.segmenter.levels", "resolution must be divisible by 2^(levels-1)"));
        }
        let mut params = ParamStore::new(DType::F32, device.clone());
        let mut rng = init_rng(seed, 0);
        let mut init = Init::new(&mut params, &mut rng, "seg");
        let g = config.max_groups;
        let width = |k: usize| config.base_width << k.min(2);
        let conv_in = init.pp("conv_in").conv(channels, width(0), 3, 1)?;
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut up_blocks = Vec::new();
        let mut ups = Vec::new();
        let mut prev = width(0);
        for k in 0..config.levels {
            down_blocks.push(ResBlock::new(&mut init.pp(&format!("down_block{k}")), prev, width(k), None, g)?);
            up_blocks.push(ResBlock::new(&mut init.pp(&format!("up_block{k}")), 2 * width(k), width(k), None, g)?);
            if k + 1 < config.levels {
                downs.push(init.pp(&format!("down{k}")).conv(width(k), width(k), 3, 2)?);
            }
            if k > 0 {
                ups.push(init.pp(&format!("up{k}")).conv(width(k), width(k - 1), 3, 1)?);
            }
            prev = width(k);
        }
        let mid = ResBlock::new(&mut init.pp("mid"), prev, prev, None, g)?;
        let conv_out = init.pp("conv_out").conv(width(0), 1, 3, 1)?;
        Ok(Self {
            config: config.clone(),
            channels,
            resolution,
            params,
            conv_in,
            down_blocks,
            downs,
            mid,
            up_blocks,
            ups,
            conv_out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    fn check(&self, images: &Tensor) -> Result<()> {
        let d = images.dims();
        if d.len() != 4 || d[1..] != [self.channels, self.resolution, self.resolution] {
            return Err(Error::Shape {
                context: "segmenter input",
                expected: vec![0, self.channels, self.resolution, self.resolution],
                actual: d.to_vec(),
            });
        }
        Ok(())
    }

    fn run(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(images)?;
        let mut h = self.conv_in.forward(&images.to_dtype(DType::F32)?)?;
        let mut skips = Vec::new();
        for (k, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(&h, None)?;
            skips.push(h.clone());
            if let Some(d) = self.downs.get(k) {
                h = d.forward(&h)?;
            }
        }
        let bottleneck = self.mid.forward(&h, None)?;
        let mut h = bottleneck.clone();
        for k in (0..self.up_blocks.len()).rev() {
            h = self.up_blocks[k].forward(&Tensor::cat(&[&h, &skips[k]], 1)?, None)?;
            if k > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.ups[k - 1].forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        Ok((self.conv_out.forward(&h)?, bottleneck))
    }

    /// Lesion logits, `[B, 1, H, W]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.run(images)?.0)
    }

    /// Spatially pooled bottleneck activations, `[B, C]`; the feature space
    /// used for Fréchet distances.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (_, mid) = self.run(images)?;
        Ok(mid.mean((2, 3))?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<Mask>> {
        let probs = candle_nn::ops::sigmoid(&self.logits(images)?)?;
        let probs = probs.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
        let r = self.resolution;
        probs
            .iter()
            .map(|p| {
                let bits = p.iter().map(|&v| (v as f64 >= self.config.threshold) as u8).collect();
                Mask::new(r, r, bits)
            })
            .collect()
    }

    /// Predictions over `pairs`, in batches.
    pub fn predict_pairs(&self, pairs: &[MaskImagePair]) -> Result<Vec<Mask>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(32) {
            let refs: Vec<&MaskImagePair> = chunk.iter().collect();
            out.extend(self.predict(&MaskImagePair::image_tensor(&refs, DType::F32, self.params.device())?)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, pairs: &[MaskImagePair]) -> Result<SegMetrics> {
        let pred = self.predict_pairs(pairs)?;
        let truth: Vec<Mask> = pairs.iter().map(|p| p.mask.clone()).collect();
        seg_metrics(&pred, &truth)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<_, _> = self.params.snapshot()?.into_iter().collect();
        candle::safetensors::save(&tensors, path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Soft Dice + binary cross-entropy on logits.
pub fn seg_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    // Stable BCE: max(z, 0) - z*y + log(1 + exp(-|z|)).
    let bce = ((logits.relu()? - (logits * target)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?.mean_all()?;
    let p = candle_nn::ops::sigmoid(logits)?;
    let inter = (&p * target)?.sum((1, 2, 3))?;
    let denom = (p.sum((1, 2, 3))? + target.sum((1, 2, 3))?)?;
    let dice = ((inter.affine(2.0, 1.0)? / denom.affine(1.0, 1.0)?)?.mean_all()?.neg()? + 1.0)?;
    Ok((bce + dice)?)
}

/// Trains a fresh segmenter for `config.steps` steps; a pure function of the
/// inputs and `seed`.
pub fn train_reference_segmenter(
    pairs: &[MaskImagePair],
    config: &SegConfig,
    seed: u64,
    device: &Device,
) -> Result<Segmenter> {
    let first = pairs.first().ok_or_else(|| Error::invalid("segmenter training set", "must not be empty"))?;
    let seg = Segmenter::new(config, first.channels, first.resolution(), seed, device)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let vars: Vec<_> = seg.params.iter().map(|(_, v)| v).collect();
    for step in 0..config.steps {
        let idx = batch_indices(seed ^ 0x5E6, step, config.batch_size, pairs.len());
        let batch: Vec<&MaskImagePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let images = MaskImagePair::image_tensor(&batch, DType::F32, device)?;
        let masks = MaskImagePair::mask_tensor(&batch, DType::F32, device)?;
        let loss = seg_loss(&seg.logits(&images)?, &masks)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("segmenter loss = {value}"),
            });
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, 1.0)?;
        let refs: Vec<ParamRef> = seg
            .params
            .iter()
            .map(|(name, var)| ParamRef { name, var, lr_mult: 1.0 })
            .collect();
        opt.step(&refs, &grads)?;
    }
    Ok(seg)
}

/// Mean IoU between the probe's segmentation of `images` and `masks`.
pub fn alignment_score(images: &Tensor, masks: &[Mask], probe: &Segmenter) -> Result<f64> {
    if images.dim(0)? != masks.len() {
        return Err(Error::Shape {
            context: "alignment_score batch",
            expected: vec![masks.len()],
            actual: vec![images.dim(0)?],
        });
    }
    let mut pred = Vec::with_capacity(masks.len());
    for start in (0..masks.len()).step_by(32) {
        let len = 32.min(masks.len() - start);
        pred.extend(probe.predict(&images.narrow(0, start, len)?)?);
    }
    Ok(seg_metrics(&pred, masks)?.m_iou)
}

#[derive(Debug, Clone)]
pub struct FrechetResult {
    pub distance: f64,
    pub mu_a: DVector<f64>,
    pub mu_b: DVector<f64>,
    pub cov_a: DMatrix<f64>,
    pub cov_b: DMatrix<f64>,
    pub feature_dim: usize,
}

fn moments(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mu = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    (mu, cov)
}

/// Square root of a symmetric PSD matrix via its eigendecomposition;
/// negative eigenvalues from round-off are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((A B)^{1/2})` for symmetric PSD `A`, `B`, computed as
/// `tr((A^{1/2} B A^{1/2})^{1/2})`; `None` if the inner matrix is clearly
/// indefinite.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let s = sqrtm_psd(a);
    let inner = &s * b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<FrechetResult> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::invalid("frechet_distance", "needs at least 2 feature vectors per side"));
    }
    let dim = features_a[0].len();
    if dim == 0 || features_a.iter().chain(features_b).any(|f| f.len() != dim) {
        return Err(Error::Shape {
            context: "frechet_distance feature dimension",
            expected: vec![dim],
            actual: features_a.iter().chain(features_b).map(|f| f.len()).filter(|&l| l != dim).take(1).collect(),
        });
    }
    let (mu_a, cov_a) = moments(features_a, dim);
    let (mu_b, cov_b) = moments(features_b, dim);
    let tr_sqrt = match trace_sqrt_product(&cov_a, &cov_b) {
        Some(v) => v,
        None => {
            let eps = DMatrix::identity(dim, dim) * 1e-6;
            trace_sqrt_product(&(&cov_a + &eps), &(&cov_b + &eps))
                .ok_or_else(|| Error::NonFinite("covariance product is not PSD".into()))?
        }
    };
    let diff = &mu_a - &mu_b;
    let distance = (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetResult {
        distance,
        mu_a,
        mu_b,
        cov_a,
        cov_b,
        feature_dim: dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn metric_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        let m = image_metrics(&a, &b).unwrap();
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.iou, 1.0 / 3.0);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.accuracy, 0.5);
        let perfect = image_metrics(&a, &a).unwrap();
        assert_eq!((perfect.dice, perfect.iou, perfect.accuracy, perfect.recall), (1.0, 1.0, 1.0, 1.0));
        let disjoint = image_metrics(&mask(&[0, 0, 1, 1]), &mask(&[1, 1, 0, 0])).unwrap();
        assert_eq!((disjoint.dice, disjoint.iou, disjoint.recall), (0.0, 0.0, 0.0));
        let empty = mask(&[0, 0]);
        assert_eq!(image_metrics(&empty, &empty).unwrap().dice, 1.0);
        assert_eq!(image_metrics(&mask(&[1, 0]), &empty).unwrap().iou, 0.0);
    }

    #[test]
    fn list_errors() {
        assert!(seg_metrics(&[mask(&[1])], &[]).is_err());
        assert!(seg_metrics(&[mask(&[1, 0])], &[mask(&[1])]).is_err());
    }

    #[test]
    fn frechet_one_dimensional() {
        // Two symmetric samples with mean 0 / 1 and unit variance.
        let a = vec![vec![-1.0], vec![1.0]];
        let b = vec![vec![0.0], vec![2.0]];
        let r = frechet_distance(&a, &b).unwrap();
        assert!((r.cov_a[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r.distance - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().distance < 1e-6);
        assert!(frechet_distance(&a[..1], &b).is_err());
        assert!(frechet_distance(&a, &[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
    }
}
