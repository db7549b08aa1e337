//! Dual-branch training: one shared corruption per element, student and
//! teacher denoising losses, the stop-gradient adaptive distillation term, and
//! one AdamW step over every trainable group.
//!
//! All randomness of step `k` comes from a generator keyed on `(seed, k)`, so a
//! run resumed from a checkpoint at step `k` replays the uninterrupted run.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use candle::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, LoadedCheckpoint};
use crate::data::MaskImagePair;
use crate::distill::{compute_weight_map, loss_adaptive_distill, loss_student, loss_teacher, loss_total};
use crate::distill::{AdaptiveWeightMap, Normalization};
use crate::error::{Error, Result};
use crate::model::{BranchPredictions, DualBranchModel, ParamGroup};
use crate::nn::init_rng;
use crate::optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, ParamRef};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Student + teacher + adaptive distillation.
    #[default]
    Distilled,
    /// Plain ControlNet: student branch only.
    ControlnetBaseline,
    /// Distillation with uniform weights.
    StandardDistill,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [
        TrainMode::ControlnetBaseline,
        TrainMode::StandardDistill,
        TrainMode::Distilled,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            TrainMode::Distilled => "distilled",
            TrainMode::ControlnetBaseline => "controlnet",
            TrainMode::StandardDistill => "standard-distill",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distilled" => Ok(TrainMode::Distilled),
            "controlnet" | "controlnet_baseline" | "controlnet-baseline" => Ok(TrainMode::ControlnetBaseline),
            "standard-distill" | "standard_distill" => Ok(TrainMode::StandardDistill),
            other => Err(Error::invalid(
                "mode",
                format!("unknown mode `{other}`; expected one of distilled, controlnet, standard-distill"),
            )),
        }
    }
}

/// Learning-rate multiplier per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupLr {
    pub encoder: f64,
    pub student: f64,
    pub teacher: f64,
    pub control_student: f64,
    pub control_teacher: f64,
    pub embeddings: f64,
}

impl Default for GroupLr {
    fn default() -> Self {
        Self {
            encoder: 1.0,
            student: 1.0,
            teacher: 1.0,
            control_student: 1.0,
            control_teacher: 1.0,
            embeddings: 1.0,
        }
    }
}

impl GroupLr {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Student => self.student,
            ParamGroup::Teacher => self.teacher,
            ParamGroup::ControlStudent => self.control_student,
            ParamGroup::ControlTeacher => self.control_teacher,
            ParamGroup::Embeddings => self.embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prompt_dropout_prob: f64,
    pub lambda_ada: f64,
    pub normalization: Normalization,
    pub mode: TrainMode,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub lr_mults: GroupLr,
    /// Steps of unconditional denoiser training before the decoders are cloned.
    pub pretrain_steps: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            prompt_dropout_prob: 0.05,
            lambda_ada: 1.0,
            normalization: Normalization::MeanOne,
            mode: TrainMode::Distilled,
            seed: 0,
            grad_clip: Some(1.0),
            lr_mults: GroupLr::default(),
            pretrain_steps: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout_prob) {
            return Err(Error::invalid("train.prompt_dropout_prob", "must lie in [0, 1]"));
        }
        if !(self.lambda_ada >= 0.0 && self.lambda_ada.is_finite()) {
            return Err(Error::invalid("train.lambda_ada", "must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("train.grad_clip", "must be positive when set"));
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub l_s: f64,
    pub l_t: f64,
    pub l_ada: f64,
    pub l_total: f64,
    pub grad_norm_student: f64,
    pub grad_norm_teacher: f64,
    pub grad_norm_encoder: f64,
    pub wall_time: f64,
}

/// Everything random about one step, drawn before any model evaluation.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub epsilon: Tensor,
    pub ts: Vec<usize>,
    pub context_on: Vec<bool>,
    pub masks: Tensor,
    pub images: Tensor,
    pub weights: Tensor,
}

/// Loss tensors of one step, still attached to the graph.
pub struct StepLosses {
    pub l_s: Tensor,
    pub l_t: Tensor,
    pub l_ada: Tensor,
    pub total: Tensor,
    pub predictions: Option<BranchPredictions>,
}

/// Consumer of per-step reports.
pub trait ReportSink {
    fn record(&mut self, report: &TrainStepReport) -> Result<()>;
}

impl ReportSink for Vec<TrainStepReport> {
    fn record(&mut self, report: &TrainStepReport) -> Result<()> {
        self.push(report.clone());
        Ok(())
    }
}

/// Streams reports as CSV rows.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
        }
    }

    /// Continues an existing stream: no header row.
    pub fn append(inner: W) -> Self {
        Self {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(inner),
        }
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))
    }
}

impl<W: Write> ReportSink for CsvSink<W> {
    fn record(&mut self, report: &TrainStepReport) -> Result<()> {
        self.writer
            .serialize(report)
            .map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))?;
        self.writer.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn read_loss_csv(path: &std::path::Path) -> Result<Vec<TrainStepReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Where and how often checkpoints are written during [`Trainer::train`].
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub every: usize,
    pub config_hash: String,
    pub version: String,
}

impl CheckpointPolicy {
    pub fn path_for(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.safetensors"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.safetensors")
    }
}

pub(crate) fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    init_rng(seed, 1 + step as u64)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Dataset index of every batch slot of `step`, from per-epoch shuffles.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let pos = step * batch_size + j;
            let epoch = pos / n;
            let perm = match &cached {
                Some((e, p)) if *e == epoch => p,
                _ => {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut init_rng(seed ^ 0x5EED_0F_DA7A, epoch as u64));
                    cached = Some((epoch, p));
                    &cached.as_ref().unwrap().1
                }
            };
            perm[pos % n]
        })
        .collect()
}

pub struct Trainer {
    model: DualBranchModel,
    schedule: NoiseSchedule,
    config: TrainConfig,
    optimizer: AdamW,
    step: usize,
    corruptions: AtomicUsize,
}

impl Trainer {
    pub fn new(model: DualBranchModel, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.adamw());
        Ok(Self {
            model,
            schedule,
            config,
            optimizer,
            step: 0,
            corruptions: AtomicUsize::new(0),
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, ckpt: &LoadedCheckpoint) -> Result<()> {
        ckpt.restore_into(self.model.config(), self.model.params())?;
        let mut moments = ckpt.moments.clone();
        for m in moments.values_mut() {
            m.m = m.m.to_dtype(self.model.dtype())?;
            m.v = m.v.to_dtype(self.model.dtype())?;
        }
        self.optimizer.set_state(moments);
        self.step = ckpt.meta.step;
        Ok(())
    }

    pub fn model(&self) -> &DualBranchModel {
        &self.model
    }

    pub fn into_model(self) -> DualBranchModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Total `forward_corrupt` calls made by this trainer.
    pub fn corruptions(&self) -> usize {
        self.corruptions.load(Ordering::Relaxed)
    }

    /// Draws timesteps, noise and dropout flags for `step` and corrupts each
    /// element exactly once.
    pub fn step_inputs(&self, batch: &[&MaskImagePair], step: usize) -> Result<StepInputs> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "must not be empty"));
        }
        let cfg = self.model.config();
        let (dtype, dev) = (self.model.dtype(), self.model.device().clone());
        for p in batch {
            if p.resolution() != cfg.resolution || p.channels != cfg.channels {
                return Err(Error::Shape {
                    context: "training pair vs model",
                    expected: vec![cfg.channels, cfg.resolution],
                    actual: vec![p.channels, p.resolution()],
                });
            }
        }
        let mut rng = step_rng(self.config.seed, step);
        let per = cfg.channels * cfg.resolution * cfg.resolution;
        let shape = (cfg.channels, cfg.resolution, cfg.resolution);
        let mut ts = Vec::with_capacity(batch.len());
        let mut context_on = Vec::with_capacity(batch.len());
        let mut x0s = Vec::with_capacity(batch.len());
        let mut x_ts = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        for p in batch {
            let t = rng.random_range(1..=self.schedule.len());
            let dropped = rng.random_bool(self.config.prompt_dropout_prob);
            let noise = Tensor::from_vec(gaussian(&mut rng, per), shape, &dev)?.to_dtype(dtype)?;
            let x0 = Tensor::from_vec(p.image.clone(), shape, &dev)?.to_dtype(dtype)?;
            let corrupted = self.schedule.forward_corrupt(&x0, t, &noise)?;
            self.corruptions.fetch_add(1, Ordering::Relaxed);
            ts.push(t);
            context_on.push(!dropped);
            x0s.push(x0);
            x_ts.push(corrupted.x_t);
            eps.push(corrupted.epsilon);
        }
        let maps: Vec<AdaptiveWeightMap> = batch
            .iter()
            .map(|p| match self.config.mode {
                TrainMode::StandardDistill => AdaptiveWeightMap::uniform(&p.mask),
                _ => compute_weight_map(&p.mask, self.config.normalization),
            })
            .collect();
        Ok(StepInputs {
            x0: Tensor::stack(&x0s, 0)?,
            x_t: Tensor::stack(&x_ts, 0)?,
            epsilon: Tensor::stack(&eps, 0)?,
            ts,
            context_on,
            masks: MaskImagePair::mask_tensor(batch, dtype, &dev)?,
            images: MaskImagePair::image_tensor(batch, dtype, &dev)?,
            weights: AdaptiveWeightMap::batch_tensor(&maps, dtype, &dev)?,
        })
    }

    /// Forward pass and loss terms for prepared inputs.
    pub fn compute_losses(&self, inputs: &StepInputs) -> Result<StepLosses> {
        let m = &self.model;
        let target = &inputs.epsilon;
        let zero = || Tensor::zeros((), m.dtype(), m.device());
        match self.config.mode {
            TrainMode::ControlnetBaseline => {
                let eps_s = m.predict_student(&inputs.x_t, &inputs.ts, &inputs.context_on, &inputs.masks)?;
                let l_s = loss_student(&eps_s, target)?;
                let (l_t, l_ada) = (zero()?, zero()?);
                let total = loss_total(&l_s, &l_t, &l_ada, 0.0)?;
                Ok(StepLosses {
                    l_s,
                    l_t,
                    l_ada,
                    total,
                    predictions: None,
                })
            }
            TrainMode::Distilled | TrainMode::StandardDistill => {
                let preds = m.predict_dual(
                    &inputs.x_t,
                    &inputs.ts,
                    &inputs.context_on,
                    &inputs.masks,
                    Some(&inputs.images),
                )?;
                let l_s = loss_student(&preds.eps_student, target)?;
                let l_t = loss_teacher(&preds.eps_teacher, target)?;
                let l_ada = loss_adaptive_distill(&preds.eps_student, &preds.eps_teacher, &inputs.weights)?;
                let total = loss_total(&l_s, &l_t, &l_ada, self.config.lambda_ada)?;
                Ok(StepLosses {
                    l_s,
                    l_t,
                    l_ada,
                    total,
                    predictions: Some(preds),
                })
            }
        }
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&MaskImagePair]) -> Result<TrainStepReport> {
        let started = Instant::now();
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite(detail) => Error::Divergence { step, detail },
            other => other,
        };
        let inputs = self.step_inputs(batch, step)?;
        let losses = self.compute_losses(&inputs).map_err(diverged)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut grads = losses.total.backward()?;

        let params = self.model.params();
        let norm_of = |groups: &[ParamGroup], grads: &candle::backprop::GradStore| {
            grad_norm(
                groups.iter().flat_map(|&g| params.with_prefix(g.prefix()).map(|(_, v)| v)),
                grads,
            )
        };
        let grad_norm_student = norm_of(&[ParamGroup::Student, ParamGroup::ControlStudent], &grads)?;
        let grad_norm_teacher = norm_of(&[ParamGroup::Teacher, ParamGroup::ControlTeacher], &grads)?;
        let grad_norm_encoder = norm_of(&[ParamGroup::Encoder, ParamGroup::Embeddings], &grads)?;
        for (name, v) in [
            ("grad_norm_student", grad_norm_student),
            ("grad_norm_teacher", grad_norm_teacher),
            ("grad_norm_encoder", grad_norm_encoder),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("{name} = {v}"),
                });
            }
        }
        if let Some(max_norm) = self.config.grad_clip {
            let vars: Vec<_> = params.iter().map(|(_, v)| v).collect();
            clip_grad_norm(&vars, &mut grads, max_norm)?;
        }
        let refs: Vec<ParamRef> = params
            .iter()
            .map(|(name, var)| ParamRef {
                name,
                var,
                lr_mult: ParamGroup::of(name).map_or(1.0, |g| self.config.lr_mults.get(g)),
            })
            .collect();
        self.optimizer.step(&refs, &grads)?;
        self.step += 1;
        Ok(TrainStepReport {
            step,
            l_s: scalar(&losses.l_s)?,
            l_t: scalar(&losses.l_t)?,
            l_ada: scalar(&losses.l_ada)?,
            l_total: scalar(&losses.total)?,
            grad_norm_student,
            grad_norm_teacher,
            grad_norm_encoder,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `config.steps` steps have completed, streaming every report to
    /// `sink` and writing checkpoints per `policy`.
    pub fn train(
        &mut self,
        data: &[MaskImagePair],
        sink: &mut dyn ReportSink,
        policy: Option<&CheckpointPolicy>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("dataset", "must not be empty"));
        }
        while self.step < self.config.steps {
            let idx = batch_indices(self.config.seed, self.step, self.config.batch_size, data.len());
            let batch: Vec<&MaskImagePair> = idx.iter().map(|&i| &data[i]).collect();
            let report = self.train_step(&batch)?;
            sink.record(&report)?;
            if let Some(p) = policy {
                if p.every > 0 && self.step % p.every == 0 && self.step < self.config.steps {
                    self.save_checkpoint(&p.path_for(self.step), p)?;
                }
            }
        }
        if let Some(p) = policy {
            self.save_checkpoint(&p.final_path(), p)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path, policy: &CheckpointPolicy) -> Result<()> {
        let mut extra = std::collections::BTreeMap::new();
        extra.insert(
            "train_config".to_string(),
            serde_json::to_string(&self.config).expect("serializable"),
        );
        let meta = CheckpointMeta {
            step: self.step,
            config_hash: policy.config_hash.clone(),
            version: policy.version.clone(),
            extra,
        };
        checkpoint::save(path, self.model.config(), self.model.params(), Some(self.optimizer.state()), &meta)
    }
}

/// Trains the shared encoder, embeddings and student decoder as a plain
/// unconditional denoiser, then copies the student decoder into the teacher.
/// Stands in for starting both decoders from one pretrained diffusion model.
pub fn pretrain_base(
    model: &DualBranchModel,
    data: &[MaskImagePair],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(config.pretrain_steps);
    if config.pretrain_steps > 0 {
        if data.is_empty() {
            return Err(Error::invalid("dataset", "must not be empty"));
        }
        let mut opt = AdamW::new(config.adamw());
        let seed = config.seed ^ 0xBA5E;
        let cfg = model.config();
        let (dtype, dev) = (model.dtype(), model.device().clone());
        let per = cfg.channels * cfg.resolution * cfg.resolution;
        let groups = [ParamGroup::Encoder, ParamGroup::Embeddings, ParamGroup::Student];
        for step in 0..config.pretrain_steps {
            let idx = batch_indices(seed, step, config.batch_size, data.len());
            let mut rng = step_rng(seed, step);
            let mut x_ts = Vec::new();
            let mut eps = Vec::new();
            let mut ts = Vec::new();
            let mut on = Vec::new();
            for &i in &idx {
                let t = rng.random_range(1..=schedule.len());
                let dropped = rng.random_bool(config.prompt_dropout_prob);
                let shape = (cfg.channels, cfg.resolution, cfg.resolution);
                let noise = Tensor::from_vec(gaussian(&mut rng, per), shape, &dev)?.to_dtype(dtype)?;
                let x0 = Tensor::from_vec(data[i].image.clone(), shape, &dev)?.to_dtype(dtype)?;
                let c = schedule.forward_corrupt(&x0, t, &noise)?;
                x_ts.push(c.x_t);
                eps.push(c.epsilon);
                ts.push(t);
                on.push(!dropped);
            }
            let x_t = Tensor::stack(&x_ts, 0)?;
            let target = Tensor::stack(&eps, 0)?;
            let pred = model.predict_student_with(&x_t, &ts, &on, None)?;
            let loss = loss_student(&pred, &target)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("pretraining loss = {value}"),
                });
            }
            let mut grads = loss.backward()?;
            let params = model.params();
            let vars: Vec<(&String, &candle::Var)> = groups
                .iter()
                .flat_map(|g| params.with_prefix(g.prefix()))
                .collect();
            if let Some(max_norm) = config.grad_clip {
                let vs: Vec<_> = vars.iter().map(|(_, v)| *v).collect();
                clip_grad_norm(&vs, &mut grads, max_norm)?;
            }
            let refs: Vec<ParamRef> = vars
                .iter()
                .map(|(name, var)| ParamRef { name, var, lr_mult: 1.0 })
                .collect();
            opt.step(&refs, &grads)?;
            losses.push(value);
        }
    }
    model.sync_teacher_from_student()?;
    Ok(losses)
}
