use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adc::experiment::ExperimentConfig;
use adc::pipeline::{self, Augment};
use adc::trainer::TrainMode;
use adc::Error;
use clap::{Args, Parser, Subcommand};

const VERSION: &str = env!("ADC_VERSION");

#[derive(Parser)]
#[command(name = "adc", version = VERSION, about = "Adaptively distilled ControlNet experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Missing fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the output root directory.
    #[arg(long)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic mask/image dataset.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Replace an existing dataset directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a generator in one of the three modes.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// distilled, controlnet or standard-distill.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate one image per mask with the student branch.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of mask PNGs (or a dataset directory with `masks/`).
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Train reference segmenters with and without augmentation.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Augmentations to compare against real-only training.
        #[arg(long, value_delimiter = ',', default_value = "synthetic,copy-paste", value_parser = parse_augment)]
        augment: Vec<Augment>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all three modes over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds (default: from config, normally 0,1,2).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Summarize finished training runs and render loss curves.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the effective config as TOML.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_augment(s: &str) -> Result<Augment, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid("--set", format!("expected KEY=VALUE, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::invalid(key, format!("`{p}` is not a table")))?;
    }
    node.insert(last.to_string(), literal(raw.trim()));
    Ok(())
}

/// Defaults < file < `--set` < dedicated flags.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let (text, origin) = match &args.config {
        Some(path) => (
            std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
            path.clone(),
        ),
        None => (String::new(), PathBuf::from("<defaults>")),
    };
    let mut cfg = if args.sets.is_empty() {
        ExperimentConfig::from_toml_str(&text, &origin)?
    } else {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::invalid(origin.display().to_string(), e.message().to_string())
        })?;
        for s in &args.sets {
            apply_set(&mut table, s)?;
        }
        ExperimentConfig::from_toml_str(&table.to_string(), &origin)?
    };
    if let Some(root) = &args.output_root {
        cfg.output_root = root.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Datagen { config, overwrite } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let m = pipeline::cmd_datagen(&cfg, overwrite)?;
            log::info!("wrote {} pairs to {}", m.entries.len(), cfg.data_dir().display());
        }
        Command::Train {
            config,
            mode,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let out = pipeline::cmd_train(&cfg, VERSION)?;
            log::info!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Sample {
            config,
            checkpoint,
            masks,
            out,
            seed,
            num_steps,
            cfg_scale,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            if let Some(n) = num_steps {
                cfg.sampler.num_steps = n;
            }
            if let Some(c) = cfg_scale {
                cfg.sampler.cfg_scale = c;
            }
            cfg.sampler.validate(&cfg.schedule.build()?)?;
            let (manifest, model) = pipeline::cmd_sample(&cfg, &checkpoint, &masks, &out, VERSION)?;
            let counts = model.counters().snapshot();
            log::info!(
                "wrote {} samples to {} (student evaluations {}, teacher evaluations {})",
                manifest.entries.len(),
                out.display(),
                counts.student,
                counts.teacher
            );
        }
        Command::Eval {
            config,
            checkpoint,
            augment,
            out,
        } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.run_dir().join("eval"));
            let report = pipeline::cmd_eval(&cfg, &checkpoint, &augment, &out, VERSION)?;
            for (cond, m) in &report.summary {
                log::info!("{cond}: mDice {}", m["m_dice"]);
            }
            if let Some(d) = &report.dice_delta {
                log::info!("real+synthetic − real mDice: {d}");
            }
            log::info!("metrics written to {}", out.display());
        }
        Command::Ablate { config, seeds } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            cfg.validate()?;
            let report = pipeline::cmd_ablate(&cfg, VERSION)?;
            for r in &report.summary {
                log::info!("{}: alignment {} mDice {}", r.mode, r.alignment, r.m_dice);
            }
        }
        Command::Report { config } => {
            let cfg = load_config(&config)?;
            let rows = pipeline::cmd_report(&cfg, VERSION)?;
            log::info!("summarized {} runs into {}", rows.len(), cfg.run_dir().join("report").display());
        }
        Command::ShowConfig { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            write_text(&out, &cfg.to_toml())?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
