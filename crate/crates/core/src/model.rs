//! Shared-encoder, dual-decoder denoiser with two ControlNet-style condition branches.
//!
//! One encoder pass over `(x_t, t, context)` feeds two decoders: the student
//! decoder receives mask features `c_m` at its skip connections, the teacher
//! decoder receives `c_mix = c_i + c_m`. Condition branches end in
//! zero-initialized 1x1 projections, so a fresh model ignores its conditions.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle::{DType, Device, Module, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_shape, Error, Result};
use crate::nn::{init_rng, timestep_features, Conv, Init, ParamStore, ResBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub resolution: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; its length is the level count.
    pub channel_mults: Vec<usize>,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub max_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            resolution: 32,
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            time_dim: 32,
            emb_dim: 64,
            max_groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("model.channels", "must be at least 1"));
        }
        if self.base_width == 0 || self.time_dim < 2 || self.emb_dim == 0 || self.max_groups == 0 {
            return Err(Error::invalid("model", "widths and dims must be positive (time_dim >= 2)"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::invalid("model.channel_mults", "needs at least one positive multiplier"));
        }
        let factor = 1usize << (self.channel_mults.len() - 1);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return Err(Error::invalid(
                "model.resolution",
                format!("must be a positive multiple of {factor}"),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    /// Stable hash of the architecture, stored with checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// `(channels, width)` of every injection point: one per level, then the bottleneck.
    pub fn injection_shapes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = (0..self.levels())
            .map(|k| (self.width(k), self.resolution >> k))
            .collect();
        let last = self.levels() - 1;
        out.push((self.width(last), self.resolution >> last));
        out
    }
}

/// Named parameter partition of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Student,
    Teacher,
    ControlStudent,
    ControlTeacher,
    Embeddings,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Student,
        ParamGroup::Teacher,
        ParamGroup::ControlStudent,
        ParamGroup::ControlTeacher,
        ParamGroup::Embeddings,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Student => "student",
            ParamGroup::Teacher => "teacher",
            ParamGroup::ControlStudent => "control_student",
            ParamGroup::ControlTeacher => "control_teacher",
            ParamGroup::Embeddings => "embed",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    MaskBranch,
    ImageBranch,
    Fused,
}

/// Per-injection-point features from a condition branch.
#[derive(Debug, Clone)]
pub struct ConditioningFeatures {
    pub levels: Vec<Tensor>,
    pub source: FeatureSource,
}

/// `c_mix = c_i + c_m`, level by level.
pub fn fuse_conditions(c_i: &ConditioningFeatures, c_m: &ConditioningFeatures) -> Result<ConditioningFeatures> {
    if c_i.source != FeatureSource::ImageBranch || c_m.source != FeatureSource::MaskBranch {
        return Err(Error::invalid("fuse_conditions", "expects image-branch and mask-branch features"));
    }
    if c_i.levels.len() != c_m.levels.len() {
        return Err(Error::Shape {
            context: "fuse_conditions levels",
            expected: vec![c_m.levels.len()],
            actual: vec![c_i.levels.len()],
        });
    }
    let levels = c_i
        .levels
        .iter()
        .zip(&c_m.levels)
        .map(|(a, b)| {
            check_shape("fuse_conditions", b.dims(), a.dims())?;
            Ok((a + b)?)
        })
        .collect::<Result<_>>()?;
    Ok(ConditioningFeatures {
        levels,
        source: FeatureSource::Fused,
    })
}

#[derive(Debug, Clone)]
pub struct BranchPredictions {
    pub eps_student: Tensor,
    pub eps_teacher: Tensor,
}

/// Evaluation counters, in batch elements.
#[derive(Debug, Default)]
pub struct Counters {
    pub encoder: AtomicUsize,
    pub student: AtomicUsize,
    pub teacher: AtomicUsize,
    pub mask_branch: AtomicUsize,
    pub image_branch: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub encoder: usize,
    pub student: usize,
    pub teacher: usize,
    pub mask_branch: usize,
    pub image_branch: usize,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            encoder: self.encoder.load(Ordering::Relaxed),
            student: self.student.load(Ordering::Relaxed),
            teacher: self.teacher.load(Ordering::Relaxed),
            mask_branch: self.mask_branch.load(Ordering::Relaxed),
            image_branch: self.image_branch.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.encoder, &self.student, &self.teacher, &self.mask_branch, &self.image_branch] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn bump(counter: &AtomicUsize, n: usize) {
        counter.fetch_add(n, Ordering::Relaxed);
    }
}

struct Embeddings {
    time_in: candle_nn::Linear,
    time_out: candle_nn::Linear,
    null_context: Tensor,
    context: Tensor,
    time_dim: usize,
}

impl Embeddings {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let time_in = init.pp("time_in").linear(cfg.time_dim, cfg.emb_dim)?;
        let time_out = init.pp("time_out").linear(cfg.emb_dim, cfg.emb_dim)?;
        let null_context = init.vector("null_context", cfg.emb_dim, 0.1)?;
        let context = init.vector("context", cfg.emb_dim, 0.1)?;
        Ok(Self {
            time_in,
            time_out,
            null_context,
            context,
            time_dim: cfg.time_dim,
        })
    }

    fn forward(&self, ts: &[usize], context_on: &[bool]) -> Result<Tensor> {
        let dev = self.context.device();
        let feats = timestep_features(ts, self.time_dim, self.context.dtype(), dev)?;
        let time = self.time_out.forward(&self.time_in.forward(&feats)?.silu()?)?;
        // Row 0 is the null context, row 1 the learned one.
        let table = Tensor::stack(&[&self.null_context, &self.context], 0)?;
        let idx: Vec<u32> = context_on.iter().map(|&on| on as u32).collect();
        let idx = Tensor::new(idx.as_slice(), dev)?;
        let ctx = table.index_select(&idx, 0)?;
        Ok((time + ctx)?)
    }
}

struct EncoderOutput {
    skips: Vec<Tensor>,
    mid: Tensor,
    emb: Tensor,
}

struct Encoder {
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv>,
    mid: ResBlock,
}

impl Encoder {
    fn new(init: &mut Init, cfg: &ModelConfig, c_in: usize, emb_dim: Option<usize>) -> Result<Self> {
        let conv_in = init.pp("conv_in").conv(c_in, cfg.width(0), 3, 1)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut prev = cfg.width(0);
        for k in 0..cfg.levels() {
            let w = cfg.width(k);
            blocks.push(ResBlock::new(&mut init.pp(&format!("block{k}")), prev, w, emb_dim, cfg.max_groups)?);
            if k + 1 < cfg.levels() {
                downs.push(init.pp(&format!("down{k}")).conv(w, w, 3, 2)?);
            }
            prev = w;
        }
        let mid = ResBlock::new(&mut init.pp("mid"), prev, prev, emb_dim, cfg.max_groups)?;
        Ok(Self {
            conv_in,
            blocks,
            downs,
            mid,
        })
    }

    fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, emb)?;
            skips.push(h.clone());
            if let Some(down) = self.downs.get(k) {
                h = down.forward(&h)?;
            }
        }
        let mid = self.mid.forward(&h, emb)?;
        Ok((skips, mid))
    }
}

/// Trainable encoder copy over a condition, read out through zero projections.
struct ControlBranch {
    encoder: Encoder,
    proj: Vec<Conv>,
    source: FeatureSource,
    c_in: usize,
}

impl ControlBranch {
    fn new(init: &mut Init, cfg: &ModelConfig, c_in: usize, source: FeatureSource) -> Result<Self> {
        let encoder = Encoder::new(init, cfg, c_in, None)?;
        let proj = cfg
            .injection_shapes()
            .iter()
            .enumerate()
            .map(|(k, &(w, _))| init.pp(&format!("zero{k}")).zero_conv(w, w))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            proj,
            source,
            c_in,
        })
    }

    fn forward(&self, cond: &Tensor) -> Result<ConditioningFeatures> {
        let (skips, mid) = self.encoder.forward(cond, None)?;
        let levels = skips
            .iter()
            .chain(std::iter::once(&mid))
            .zip(&self.proj)
            .map(|(h, p)| Ok(p.forward(h)?))
            .collect::<Result<_>>()?;
        Ok(ConditioningFeatures {
            levels,
            source: self.source,
        })
    }
}

struct Decoder {
    blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    norm_out: candle_nn::GroupNorm,
    conv_out: Conv,
}

impl Decoder {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let emb = Some(cfg.emb_dim);
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        // Stored top-down: blocks[k] runs at level k.
        for k in 0..cfg.levels() {
            let w = cfg.width(k);
            blocks.push(ResBlock::new(&mut init.pp(&format!("block{k}")), 2 * w, w, emb, cfg.max_groups)?);
            if k > 0 {
                ups.push(init.pp(&format!("up{k}")).conv(w, cfg.width(k - 1), 3, 1)?);
            }
        }
        let norm_out = init.pp("norm_out").group_norm(cfg.width(0), cfg.max_groups)?;
        let conv_out = init.pp("conv_out").conv(cfg.width(0), cfg.channels, 3, 1)?;
        Ok(Self {
            blocks,
            ups,
            norm_out,
            conv_out,
        })
    }

    fn forward(&self, enc: &EncoderOutput, cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let levels = self.blocks.len();
        let inject = |h: &Tensor, k: usize| -> Result<Tensor> {
            match cond {
                Some(c) => Ok((h + &c.levels[k])?),
                None => Ok(h.clone()),
            }
        };
        let mut h = inject(&enc.mid, levels)?;
        for k in (0..levels).rev() {
            let skip = inject(&enc.skips[k], k)?;
            h = self.blocks[k].forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&enc.emb))?;
            if k > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.ups[k - 1].forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}

/// The student/teacher denoiser pair over one shared encoder.
pub struct DualBranchModel {
    config: ModelConfig,
    params: ParamStore,
    embed: Embeddings,
    encoder: Encoder,
    student: Decoder,
    teacher: Decoder,
    control_student: ControlBranch,
    control_teacher: ControlBranch,
    counters: Counters,
}

impl DualBranchModel {
    /// Fresh model; the teacher decoder starts as an exact copy of the student decoder.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, device.clone());
        let mut rng = init_rng(seed, 0);
        let cfg = config;
        let embed = Embeddings::new(&mut Init::new(&mut params, &mut rng, ParamGroup::Embeddings.prefix()), cfg)?;
        let encoder = Encoder::new(
            &mut Init::new(&mut params, &mut rng, ParamGroup::Encoder.prefix()),
            cfg,
            cfg.channels,
            Some(cfg.emb_dim),
        )?;
        let student = Decoder::new(&mut Init::new(&mut params, &mut rng, ParamGroup::Student.prefix()), cfg)?;
        let teacher = Decoder::new(&mut Init::new(&mut params, &mut rng, ParamGroup::Teacher.prefix()), cfg)?;
        let control_student = ControlBranch::new(
            &mut Init::new(&mut params, &mut rng, ParamGroup::ControlStudent.prefix()),
            cfg,
            1,
            FeatureSource::MaskBranch,
        )?;
        let control_teacher = ControlBranch::new(
            &mut Init::new(&mut params, &mut rng, ParamGroup::ControlTeacher.prefix()),
            cfg,
            cfg.channels,
            FeatureSource::ImageBranch,
        )?;
        let model = Self {
            config: config.clone(),
            params,
            embed,
            encoder,
            student,
            teacher,
            control_student,
            control_teacher,
            counters: Counters::default(),
        };
        model.sync_teacher_from_student()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn group_vars(&self, group: ParamGroup) -> Vec<(&String, &Var)> {
        self.params.with_prefix(group.prefix()).collect()
    }

    /// Overwrite the teacher decoder with the student decoder's current values.
    pub fn sync_teacher_from_student(&self) -> Result<()> {
        for (name, var) in self.params.with_prefix(ParamGroup::Teacher.prefix()) {
            let src_name = format!("student{}", &name["teacher".len()..]);
            let src = self
                .params
                .get(&src_name)
                .ok_or_else(|| Error::invalid("model", format!("missing {src_name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    fn check_input(&self, name: &'static str, x: &Tensor, channels: usize) -> Result<usize> {
        let dims = x.dims();
        if dims.len() != 4 {
            return Err(Error::Shape {
                context: name,
                expected: vec![0, channels, self.config.resolution, self.config.resolution],
                actual: dims.to_vec(),
            });
        }
        let r = self.config.resolution;
        check_shape(name, &[dims[0], channels, r, r], dims)?;
        Ok(dims[0])
    }

    pub fn encode_mask_condition(&self, mask: &Tensor) -> Result<ConditioningFeatures> {
        let n = self.check_input("mask condition", mask, 1)?;
        check_binary(mask, "mask condition")?;
        Counters::bump(&self.counters.mask_branch, n);
        self.control_student.forward(&mask.to_dtype(self.dtype())?)
    }

    pub fn encode_image_condition(&self, image: &Tensor) -> Result<ConditioningFeatures> {
        let n = self.check_input("image condition", image, self.control_teacher.c_in)?;
        Counters::bump(&self.counters.image_branch, n);
        self.control_teacher.forward(&image.to_dtype(self.dtype())?)
    }

    fn encode(&self, x_t: &Tensor, ts: &[usize], context_on: &[bool]) -> Result<EncoderOutput> {
        let n = self.check_input("x_t", x_t, self.config.channels)?;
        if ts.len() != n || context_on.len() != n {
            return Err(Error::Shape {
                context: "timesteps/context flags",
                expected: vec![n],
                actual: vec![ts.len(), context_on.len()],
            });
        }
        Counters::bump(&self.counters.encoder, n);
        let emb = self.embed.forward(ts, context_on)?;
        let (skips, mid) = self.encoder.forward(x_t, Some(&emb))?;
        Ok(EncoderOutput { skips, mid, emb })
    }

    /// Both predictions from a single encoder pass.
    pub fn predict_dual(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        context_on: &[bool],
        mask: &Tensor,
        image: Option<&Tensor>,
    ) -> Result<BranchPredictions> {
        let image = image.ok_or_else(|| Error::invalid("image", "teacher prediction requires the paired image"))?;
        let c_m = self.encode_mask_condition(mask)?;
        let c_i = self.encode_image_condition(image)?;
        let c_mix = fuse_conditions(&c_i, &c_m)?;
        let enc = self.encode(x_t, ts, context_on)?;
        let n = x_t.dim(0)?;
        Counters::bump(&self.counters.student, n);
        Counters::bump(&self.counters.teacher, n);
        let eps_student = self.student.forward(&enc, Some(&c_m))?;
        let eps_teacher = self.teacher.forward(&enc, Some(&c_mix))?;
        Ok(BranchPredictions {
            eps_student,
            eps_teacher,
        })
    }

    /// Student prediction conditioned on the mask only.
    pub fn predict_student(&self, x_t: &Tensor, ts: &[usize], context_on: &[bool], mask: &Tensor) -> Result<Tensor> {
        let c_m = self.encode_mask_condition(mask)?;
        self.predict_student_with(x_t, ts, context_on, Some(&c_m))
    }

    /// Student prediction with precomputed (or absent) mask features.
    pub fn predict_student_with(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        context_on: &[bool],
        c_m: Option<&ConditioningFeatures>,
    ) -> Result<Tensor> {
        let enc = self.encode(x_t, ts, context_on)?;
        Counters::bump(&self.counters.student, x_t.dim(0)?);
        self.student.forward(&enc, c_m)
    }

    /// Teacher prediction with precomputed (or absent) fused features.
    pub fn predict_teacher_with(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        context_on: &[bool],
        c_mix: Option<&ConditioningFeatures>,
    ) -> Result<Tensor> {
        let enc = self.encode(x_t, ts, context_on)?;
        Counters::bump(&self.counters.teacher, x_t.dim(0)?);
        self.teacher.forward(&enc, c_mix)
    }
}

/// Errors unless every element is exactly 0 or 1.
pub fn check_binary(mask: &Tensor, context: &'static str) -> Result<()> {
    let values = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::NonBinaryMask(context))
    }
}
