//! End-to-end commands: data generation, training, sampling, evaluation,
//! ablation and reporting. Every artifact records the config hash and the
//! tool version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LoadedCheckpoint};
use crate::data::{self, encode_image_png, read_mask_png, Dataset, Manifest, MaskImagePair};
use crate::distill::compute_weight_map;
use crate::error::{Error, Result};
use crate::eval::{alignment_score, frechet_distance, train_reference_segmenter, SegMetrics, Segmenter};
use crate::experiment::ExperimentConfig;
use crate::mask::Mask;
use crate::model::DualBranchModel;
use crate::plot::{self, Series};
use crate::sampler::{sample_indexed, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::stats;
use crate::trainer::{
    pretrain_base, read_loss_csv, CheckpointPolicy, CsvSink, TrainMode, TrainStepReport, Trainer,
};

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig, version: &str) -> Self {
        Self {
            config_hash: config.hash(),
            version: version.to_string(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_datagen(config: &ExperimentConfig, overwrite: bool) -> Result<Manifest> {
    let dir = config.data_dir();
    let d = &config.data;
    let manifest = data::build_dataset(
        &d.generator,
        d.n_train,
        d.n_test,
        d.seed,
        &dir,
        overwrite,
        Some(config.hash()),
    )?;
    Ok(manifest)
}

/// Loads the experiment's dataset, checking that it was generated with the
/// configured generator and seed.
pub fn load_data(config: &ExperimentConfig) -> Result<Dataset> {
    let dir = config.data_dir();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Io {
            path: manifest_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run `datagen` first"),
        });
    }
    let manifest = data::read_manifest(&dir)?;
    if manifest.generator != config.data.generator || manifest.seed != config.data.seed {
        return Err(Error::Format {
            path: manifest_path,
            reason: "dataset was generated with a different generator config or seed".into(),
        });
    }
    data::load_dataset(&dir)
}

pub fn train_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .run_dir()
        .join("train")
        .join(config.train.mode.cli_name())
        .join(format!("seed{}", config.train.seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub final_tail_l_s: f64,
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<TrainStepReport>,
    /// False when a finished run with the same config hash was found and reused.
    pub trained: bool,
}

/// Mean of `l_s` over the final `fraction` of the history.
pub fn tail_mean_l_s(history: &[TrainStepReport], fraction: f64) -> f64 {
    let n = history.len();
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
    stats::mean(&history[n - k..].iter().map(|r| r.l_s).collect::<Vec<_>>())
}

fn latest_checkpoint(dir: &Path, hash: &str) -> Result<Option<LoadedCheckpoint>> {
    let ckpt_dir = dir.join("checkpoints");
    if !ckpt_dir.exists() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&ckpt_dir)
        .map_err(|e| Error::io(&ckpt_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    names.sort();
    for path in names.iter().rev() {
        let ckpt = checkpoint::load(path, &Device::Cpu)?;
        if ckpt.meta.config_hash == hash {
            return Ok(Some(ckpt));
        }
    }
    Ok(None)
}

/// Trains one generator per `config.train` (mode and seed included). A finished
/// run with the same config hash is reused; an unfinished one resumes from its
/// latest checkpoint.
pub fn cmd_train(config: &ExperimentConfig, version: &str) -> Result<TrainOutcome> {
    config.validate()?;
    let prov = Provenance::new(config, version);
    let dir = train_dir(config);
    let final_path = dir.join("final.safetensors");
    let csv_path = dir.join("losses.csv");
    if final_path.exists() && csv_path.exists() {
        let done = checkpoint::load(&final_path, &Device::Cpu)?;
        if done.meta.config_hash == prov.config_hash && done.meta.step == config.train.steps {
            log::info!("reusing finished run in {}", dir.display());
            return Ok(TrainOutcome {
                history: read_loss_csv(&csv_path)?,
                checkpoint: final_path,
                dir,
                trained: false,
            });
        }
    }
    let dataset = load_data(config)?;
    mkdir(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()).map_err(|e| Error::io(&dir, e))?;
    let schedule = config.schedule.build()?;
    let model = DualBranchModel::new(&config.model, config.train.seed, DType::F32, &Device::Cpu)?;
    let resume = latest_checkpoint(&dir, &prov.config_hash)?;
    let mut history = Vec::new();
    let mut trainer = match &resume {
        Some(ckpt) => {
            log::info!("resuming from {} (step {})", ckpt.path.display(), ckpt.meta.step);
            let mut t = Trainer::new(model, schedule.clone(), config.train.clone())?;
            t.resume(ckpt)?;
            history = read_loss_csv(&csv_path)
                .unwrap_or_default()
                .into_iter()
                .filter(|r| r.step < ckpt.meta.step)
                .collect();
            t
        }
        None => {
            let losses = pretrain_base(&model, &dataset.train, &schedule, &config.train)?;
            if !losses.is_empty() {
                log::info!("pretrained base denoiser for {} steps", losses.len());
            }
            Trainer::new(model, schedule.clone(), config.train.clone())?
        }
    };
    // Rewrite the CSV so it holds exactly the steps before the resume point.
    {
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut sink = CsvSink::new(file);
        for r in &history {
            crate::trainer::ReportSink::record(&mut sink, r)?;
        }
    }
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let mut sink = if history.is_empty() {
        CsvSink::new(file)
    } else {
        CsvSink::append(file)
    };
    struct Tee<'a> {
        inner: &'a mut CsvSink<fs::File>,
        all: &'a mut Vec<TrainStepReport>,
        every: usize,
    }
    impl crate::trainer::ReportSink for Tee<'_> {
        fn record(&mut self, r: &TrainStepReport) -> Result<()> {
            if self.every > 0 && (r.step + 1) % self.every == 0 {
                log::info!(
                    "step {} l_s {:.5} l_t {:.5} l_ada {:.5}",
                    r.step + 1,
                    r.l_s,
                    r.l_t,
                    r.l_ada
                );
            }
            self.all.push(r.clone());
            self.inner.record(r)
        }
    }
    let policy = CheckpointPolicy {
        dir: dir.join("checkpoints"),
        every: config.train.checkpoint_every,
        config_hash: prov.config_hash.clone(),
        version: version.to_string(),
    };
    let every = (config.train.steps / 20).max(1);
    trainer.train(
        &dataset.train,
        &mut Tee {
            inner: &mut sink,
            all: &mut history,
            every,
        },
        Some(&policy),
    )?;
    drop(sink);
    fs::rename(policy.final_path(), &final_path).map_err(|e| Error::io(&final_path, e))?;

    if let Some(first) = dataset.train.first() {
        let wm = compute_weight_map(&first.mask, config.train.normalization);
        plot::heatmap(&wm.weights, wm.height, wm.width, 8, &dir.join("weight_map.png"))?;
    }
    render_loss_plot(config, &dir.join("loss_curve.png"))?;
    let record = TrainRecord {
        provenance: prov,
        mode: config.train.mode,
        seed: config.train.seed,
        steps: config.train.steps,
        checkpoint_sha256: checkpoint::file_hash(&final_path)?,
        checkpoint: final_path.clone(),
        final_tail_l_s: if history.is_empty() { f64::NAN } else { tail_mean_l_s(&history, 0.1) },
    };
    write_json(&dir.join("run.json"), &record)?;
    Ok(TrainOutcome {
        dir,
        checkpoint: final_path,
        history,
        trained: true,
    })
}

/// Student-loss curves of every mode trained so far with this config's seed.
fn render_loss_plot(config: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for mode in TrainMode::ALL {
        let mut c = config.clone();
        c.train.mode = mode;
        let csv = train_dir(&c).join("losses.csv");
        if let Ok(h) = read_loss_csv(&csv) {
            series.push(Series {
                label: mode.cli_name().into(),
                points: h.iter().map(|r| (r.step as f64, r.l_s)).collect(),
            });
        }
    }
    plot::loss_curves(&series, &format!("student loss seed {}", config.train.seed), path)
}

/// Samples one image per mask; output `i` uses noise index `first_index + i`.
pub fn generate_synthetic(
    model: &DualBranchModel,
    masks: &[Mask],
    first_index: usize,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<MaskImagePair>> {
    let mut out = Vec::with_capacity(masks.len());
    let cfg = model.config();
    for (c, chunk) in masks.chunks(32).enumerate() {
        let refs: Vec<&Mask> = chunk.iter().collect();
        let mt = Mask::batch_tensor(&refs, model.dtype(), model.device())?;
        let imgs = sample_indexed(model, &mt, first_index + c * 32, sampler, schedule)?;
        let rows = imgs.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
        for (k, (img, m)) in rows.into_iter().zip(chunk).enumerate() {
            let idx = first_index + c * 32 + k;
            out.push(MaskImagePair::from_parts(img, m.clone(), cfg.channels, idx as u64)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub mask: String,
    pub image: String,
    pub noise_index: usize,
    pub image_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub sampler: SamplerConfig,
    pub entries: Vec<SampleEntry>,
}

/// Mask PNGs in `dir` (or `dir/masks`), sorted by file name.
pub fn list_masks(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join("masks").is_dir() { dir.join("masks") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid("masks", format!("no PNG masks in {}", dir.display())));
    }
    Ok(paths)
}

pub fn cmd_sample(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    masks_dir: &Path,
    out_dir: &Path,
    version: &str,
) -> Result<(SampleManifest, DualBranchModel)> {
    let ckpt = checkpoint::load(checkpoint_path, &Device::Cpu)?;
    let model = ckpt.into_model(DType::F32, &Device::Cpu)?;
    let schedule = config.schedule.build()?;
    let paths = list_masks(masks_dir)?;
    let masks = paths.iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
    for (p, m) in paths.iter().zip(&masks) {
        if m.height() != model.config().resolution || m.width() != model.config().resolution {
            return Err(Error::invalid(
                p.display().to_string(),
                format!(
                    "mask is {}x{} but the checkpoint expects {r}x{r}",
                    m.height(),
                    m.width(),
                    r = model.config().resolution
                ),
            ));
        }
    }
    let pairs = generate_synthetic(&model, &masks, 0, &config.sampler, &schedule)?;
    let img_dir = out_dir.join("images");
    mkdir(&img_dir)?;
    let mut entries = Vec::new();
    for (i, (pair, path)) in pairs.iter().zip(&paths).enumerate() {
        let name = path.file_name().expect("file path").to_string_lossy().to_string();
        let bytes = encode_image_png(pair)?;
        let dest = img_dir.join(&name);
        fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
        entries.push(SampleEntry {
            mask: path.display().to_string(),
            image: format!("images/{name}"),
            noise_index: i,
            image_sha256: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes)),
        });
    }
    let grid: Vec<Vec<f32>> = pairs.iter().take(16).map(|p| p.image.clone()).collect();
    plot::image_grid(&grid, model.config().channels, model.config().resolution, 4, 4, &out_dir.join("grid.png"))?;
    let manifest = SampleManifest {
        provenance: Provenance::new(config, version),
        checkpoint: checkpoint_path.to_path_buf(),
        checkpoint_sha256: checkpoint::file_hash(checkpoint_path)?,
        sampler: config.sampler.clone(),
        entries,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok((manifest, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Real,
    RealSynthetic,
    CopyPaste,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Real => "real",
            Condition::RealSynthetic => "real+synthetic",
            Condition::CopyPaste => "copy-paste",
        }
    }
}

/// Extra conditions requested with `--augment`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    Synthetic,
    CopyPaste,
}

impl std::str::FromStr for Augment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "synthetic" | "ours" => Ok(Augment::Synthetic),
            "copy-paste" | "copy_paste" => Ok(Augment::CopyPaste),
            other => Err(Error::invalid(
                "augment",
                format!("unknown augmentation `{other}`; expected none, synthetic or copy-paste"),
            )),
        }
    }
}

pub fn conditions_for(augment: &[Augment]) -> Vec<Condition> {
    let mut out = vec![Condition::Real];
    if augment.contains(&Augment::Synthetic) {
        out.push(Condition::RealSynthetic);
    }
    if augment.contains(&Augment::CopyPaste) {
        out.push(Condition::CopyPaste);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub seed: u64,
    pub train_size: usize,
    pub segmenter_steps: usize,
    /// Generator network evaluations (batch elements) spent on this condition.
    pub generator_evaluations: usize,
    pub m_dice: f64,
    pub m_iou: f64,
    pub accuracy: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: stats::mean(xs),
            sd: stats::std_dev(xs),
        }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub rows: Vec<ConditionRow>,
    pub summary: BTreeMap<String, BTreeMap<String, MeanSd>>,
    /// real+synthetic minus real mDice, per seed.
    pub dice_delta: Option<MeanSd>,
    /// Probe IoU on generated images vs their conditioning masks.
    pub alignment_score: Option<f64>,
    /// Probe IoU on held-out real images (upper reference).
    pub alignment_reference: f64,
    pub frechet_synthetic_vs_test: Option<f64>,
    pub frechet_train_vs_test: f64,
}

fn real_subset(config: &ExperimentConfig, data: &Dataset) -> Vec<MaskImagePair> {
    let k = config.eval.real_subset;
    if k == 0 || k >= data.train.len() {
        data.train.clone()
    } else {
        data.train[..k].to_vec()
    }
}

fn images_tensor(pairs: &[MaskImagePair]) -> Result<candle::Tensor> {
    let refs: Vec<&MaskImagePair> = pairs.iter().collect();
    MaskImagePair::image_tensor(&refs, DType::F32, &Device::Cpu)
}

fn probe_features(probe: &Segmenter, pairs: &[MaskImagePair]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        out.extend(probe.features(&images_tensor(chunk)?)?);
    }
    Ok(out)
}

fn total_evaluations(model: &DualBranchModel) -> usize {
    let s = model.counters().snapshot();
    s.encoder + s.student + s.teacher + s.mask_branch + s.image_branch
}

fn synthetic_masks(real: &[MaskImagePair], per_mask: usize) -> Vec<Mask> {
    (0..per_mask).flat_map(|_| real.iter().map(|p| p.mask.clone())).collect()
}

fn row(condition: Condition, seed: u64, n: usize, steps: usize, gen: usize, m: SegMetrics) -> ConditionRow {
    ConditionRow {
        condition: condition.name().into(),
        seed,
        train_size: n,
        segmenter_steps: steps,
        generator_evaluations: gen,
        m_dice: m.m_dice,
        m_iou: m.m_iou,
        accuracy: m.accuracy,
        recall: m.recall,
    }
}

/// Downstream evaluation of one generator checkpoint.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    augment: &[Augment],
    out_dir: &Path,
    version: &str,
) -> Result<EvalReport> {
    let data = load_data(config)?;
    let real = real_subset(config, &data);
    let ckpt = checkpoint::load(checkpoint_path, &Device::Cpu)?;
    let model = ckpt.into_model(DType::F32, &Device::Cpu)?;
    let schedule = config.schedule.build()?;
    let conditions = conditions_for(augment);
    let seg_cfg = &config.eval.segmenter;
    let dev = Device::Cpu;
    mkdir(out_dir)?;

    let mut synthetic: Option<Vec<MaskImagePair>> = None;
    let mut synth_cost = 0;
    if conditions.contains(&Condition::RealSynthetic) {
        let before = total_evaluations(&model);
        let masks = synthetic_masks(&real, config.eval.synthetic_per_mask);
        log::info!("sampling {} synthetic pairs", masks.len());
        synthetic = Some(generate_synthetic(&model, &masks, 0, &config.sampler, &schedule)?);
        synth_cost = total_evaluations(&model) - before;
    }

    let mut rows = Vec::new();
    let mut probe = None;
    for &seed in &config.eval.seeds {
        for &cond in &conditions {
            let before = total_evaluations(&model);
            let train: Vec<MaskImagePair> = match cond {
                Condition::Real => real.clone(),
                Condition::RealSynthetic => real.iter().chain(synthetic.iter().flatten()).cloned().collect(),
                Condition::CopyPaste => {
                    let copies = config.eval.synthetic_per_mask;
                    (0..=copies).flat_map(|_| real.iter().cloned()).collect()
                }
            };
            let seg = train_reference_segmenter(&train, seg_cfg, seed, &dev)?;
            let metrics = seg.evaluate(&data.test)?;
            let mut gen = total_evaluations(&model) - before;
            if cond == Condition::RealSynthetic {
                gen += synth_cost;
            }
            log::info!("{} seed {seed}: mDice {:.4}", cond.name(), metrics.m_dice);
            rows.push(row(cond, seed, train.len(), seg_cfg.steps, gen, metrics));
            if cond == Condition::Real && probe.is_none() {
                probe = Some(seg);
            }
        }
    }
    let probe = probe.expect("real condition always runs");
    let alignment_reference = probe.evaluate(&data.test)?.m_iou;
    let test_feats = probe_features(&probe, &data.test)?;
    let frechet_train_vs_test = frechet_distance(&probe_features(&probe, &real)?, &test_feats)?.distance;
    let (alignment, fid) = match &synthetic {
        Some(s) => {
            let masks: Vec<Mask> = s.iter().map(|p| p.mask.clone()).collect();
            let a = alignment_score(&images_tensor(s)?, &masks, &probe)?;
            let f = frechet_distance(&probe_features(&probe, s)?, &test_feats)?.distance;
            let grid: Vec<Vec<f32>> = s.iter().take(16).map(|p| p.image.clone()).collect();
            let c = model.config();
            plot::image_grid(&grid, c.channels, c.resolution, 4, 4, &out_dir.join("synthetic_grid.png"))?;
            (Some(a), Some(f))
        }
        None => (None, None),
    };

    let mut summary = BTreeMap::new();
    for &cond in &conditions {
        let sel: Vec<&ConditionRow> = rows.iter().filter(|r| r.condition == cond.name()).collect();
        let col = |f: fn(&ConditionRow) -> f64| MeanSd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let mut m = BTreeMap::new();
        m.insert("m_dice".to_string(), col(|r| r.m_dice));
        m.insert("m_iou".to_string(), col(|r| r.m_iou));
        m.insert("accuracy".to_string(), col(|r| r.accuracy));
        m.insert("recall".to_string(), col(|r| r.recall));
        summary.insert(cond.name().to_string(), m);
    }
    let dice_delta = synthetic.as_ref().map(|_| {
        let deltas: Vec<f64> = config
            .eval
            .seeds
            .iter()
            .map(|&s| {
                let get = |c: Condition| {
                    rows.iter()
                        .find(|r| r.seed == s && r.condition == c.name())
                        .map(|r| r.m_dice)
                        .unwrap_or(f64::NAN)
                };
                get(Condition::RealSynthetic) - get(Condition::Real)
            })
            .collect();
        MeanSd::of(&deltas)
    });
    let report = EvalReport {
        provenance: Provenance::new(config, version),
        checkpoint: checkpoint_path.to_path_buf(),
        checkpoint_sha256: checkpoint::file_hash(checkpoint_path)?,
        rows,
        summary,
        dice_delta,
        alignment_score: alignment,
        alignment_reference,
        frechet_synthetic_vs_test: fid,
        frechet_train_vs_test,
    };
    write_json(&out_dir.join("metrics.json"), &report)?;
    write_csv(&out_dir.join("metrics.csv"), &report.rows)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub tail_l_s: f64,
    pub alignment: f64,
    pub frechet: f64,
    pub m_dice: f64,
    pub m_iou: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub real_m_dice: f64,
    pub dice_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub mode: String,
    pub runs: usize,
    pub tail_l_s: String,
    pub alignment: String,
    pub frechet: String,
    pub m_dice: String,
    pub m_iou: String,
    pub accuracy: String,
    pub recall: String,
    pub dice_delta: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummaryRow>,
}

/// Mean ± sd per mode over the rows, in `TrainMode::ALL` order.
pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummaryRow> {
    TrainMode::ALL
        .iter()
        .filter_map(|mode| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode.cli_name()).collect();
            if sel.is_empty() {
                return None;
            }
            let col = |f: fn(&AblationRow) -> f64| MeanSd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()).to_string();
            Some(AblationSummaryRow {
                mode: mode.cli_name().into(),
                runs: sel.len(),
                tail_l_s: col(|r| r.tail_l_s),
                alignment: col(|r| r.alignment),
                frechet: col(|r| r.frechet),
                m_dice: col(|r| r.m_dice),
                m_iou: col(|r| r.m_iou),
                accuracy: col(|r| r.accuracy),
                recall: col(|r| r.recall),
                dice_delta: col(|r| r.dice_delta),
            })
        })
        .collect()
}

/// Trains and evaluates every mode for every ablation seed. The segmenter
/// seed of a row equals its generator seed, and one probe (trained on real
/// pairs only) is shared by all modes of a seed.
pub fn cmd_ablate(config: &ExperimentConfig, version: &str) -> Result<AblationReport> {
    config.validate()?;
    let data = load_data(config)?;
    let real = real_subset(config, &data);
    let seg_cfg = &config.eval.segmenter;
    let dev = Device::Cpu;
    let schedule = config.schedule.build()?;
    let mut rows = Vec::new();
    for &seed in &config.ablate.seeds {
        let probe = train_reference_segmenter(&real, seg_cfg, seed, &dev)?;
        let real_metrics = probe.evaluate(&data.test)?;
        let test_feats = probe_features(&probe, &data.test)?;
        for mode in TrainMode::ALL {
            let mut c = config.clone();
            c.train.mode = mode;
            c.train.seed = seed;
            let run = cmd_train(&c, version)?;
            let ckpt = checkpoint::load(&run.checkpoint, &dev)?;
            let model = ckpt.into_model(DType::F32, &dev)?;
            let masks = synthetic_masks(&real, config.eval.synthetic_per_mask);
            let synth = generate_synthetic(&model, &masks, 0, &config.sampler, &schedule)?;
            let alignment = alignment_score(&images_tensor(&synth)?, &masks, &probe)?;
            let frechet = frechet_distance(&probe_features(&probe, &synth)?, &test_feats)?.distance;
            let train: Vec<MaskImagePair> = real.iter().chain(&synth).cloned().collect();
            let seg = train_reference_segmenter(&train, seg_cfg, seed, &dev)?;
            let m = seg.evaluate(&data.test)?;
            log::info!(
                "ablate seed {seed} {mode}: alignment {alignment:.4} mDice {:.4} (real {:.4})",
                m.m_dice,
                real_metrics.m_dice
            );
            rows.push(AblationRow {
                mode: mode.cli_name().into(),
                seed,
                tail_l_s: tail_mean_l_s(&run.history, 0.1),
                alignment,
                frechet,
                m_dice: m.m_dice,
                m_iou: m.m_iou,
                accuracy: m.accuracy,
                recall: m.recall,
                real_m_dice: real_metrics.m_dice,
                dice_delta: m.m_dice - real_metrics.m_dice,
            });
        }
    }
    let report = AblationReport {
        provenance: Provenance::new(config, version),
        summary: summarize_ablation(&rows),
        rows,
    };
    let dir = config.run_dir().join("ablate");
    mkdir(&dir)?;
    write_csv(&dir.join("rows.csv"), &report.rows)?;
    write_csv(&dir.join("table.csv"), &report.summary)?;
    write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub head_l_s: f64,
    pub tail_l_s: f64,
}

/// Collects every finished training run under the experiment directory into
/// one summary CSV plus one loss-curve figure per seed.
pub fn cmd_report(config: &ExperimentConfig, version: &str) -> Result<Vec<ReportRow>> {
    let train_root = config.run_dir().join("train");
    let mut rows = Vec::new();
    let mut seeds = std::collections::BTreeSet::new();
    for mode in TrainMode::ALL {
        let mode_dir = train_root.join(mode.cli_name());
        let Ok(entries) = fs::read_dir(&mode_dir) else { continue };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for d in dirs {
            let Some(seed) = d
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed"))
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            let Ok(h) = read_loss_csv(&d.join("losses.csv")) else { continue };
            if h.is_empty() {
                continue;
            }
            let k = (h.len() / 10).max(1);
            rows.push(ReportRow {
                mode: mode.cli_name().into(),
                seed,
                steps: h.len(),
                head_l_s: stats::mean(&h[..k].iter().map(|r| r.l_s).collect::<Vec<_>>()),
                tail_l_s: tail_mean_l_s(&h, 0.1),
            });
            seeds.insert(seed);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("report", format!("no training runs under {}", train_root.display())));
    }
    let dir = config.run_dir().join("report");
    mkdir(&dir)?;
    for seed in seeds {
        let mut c = config.clone();
        c.train.seed = seed;
        render_loss_plot(&c, &dir.join(format!("loss_seed{seed}.png")))?;
    }
    write_csv(&dir.join("summary.csv"), &rows)?;
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        provenance: Provenance,
        runs: &'a [ReportRow],
    }
    write_json(
        &dir.join("report.json"),
        &Out {
            provenance: Provenance::new(config, version),
            runs: &rows,
        },
    )?;
    Ok(rows)
}
