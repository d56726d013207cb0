//! `train`: run one optimization stage over a generated dataset and write
//! the checkpoint, the CSV loss trace, and the effective configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, ValueEnum};
use saasr_core::dataset::{read_jsonl, SampleRecord};
use saasr_core::model::checkpoint;
use saasr_core::model::{ModelConfig, SaAsrModel};
use saasr_core::synth::MixtureSample;
use saasr_core::train::{train_loop, write_trace, TrainConfig, TrainStage};
use saasr_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::common;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StageArg {
    AsrOnly,
    Joint,
}

impl From<StageArg> for TrainStage {
    fn from(s: StageArg) -> TrainStage {
        match s {
            StageArg::AsrOnly => TrainStage::AsrOnly,
            StageArg::Joint => TrainStage::Joint,
        }
    }
}

/// On-disk run configuration. `model` may be omitted when initializing
/// from a checkpoint, which carries its own architecture.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFileConfig {
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

/// The echoed effective configuration: everything needed to replay.
#[derive(Serialize)]
struct TrainEcho<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: String,
    init_from: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON configuration file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (uses its train.jsonl) or an explicit JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    force: bool,
    /// Training stage. Without a config file this also selects the stage's
    /// default hyperparameters (masking is on only in the first stage).
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Checkpoint to initialize from; required for the joint stage unless
    /// --cold-start is given.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Allow the joint stage to start from fresh weights.
    #[arg(long)]
    cold_start: bool,
    /// Optimizer step count override (0 writes the initialization back out).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    speaker_loss_weight: Option<f64>,
    /// Mask-augmentation override (defaults follow the stage).
    #[arg(long)]
    mask_augment: Option<bool>,
    /// Seed override for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: &TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainFileConfig = common::load_config(args.config.as_deref())?;
    if let Some(stage) = args.stage {
        if args.config.is_none() {
            cfg.train = TrainConfig::default_for(stage.into());
        } else {
            cfg.train.stage = stage.into();
        }
    }
    if let Some(v) = args.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.peak_lr {
        cfg.train.peak_lr = v;
    }
    if let Some(v) = args.warmup {
        cfg.train.warmup_steps = v;
    }
    if let Some(v) = args.speaker_loss_weight {
        cfg.train.speaker_loss_weight = v;
    }
    if let Some(v) = args.mask_augment {
        cfg.train.mask_augment = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    cfg.train.validate()?;

    if cfg.train.stage == TrainStage::Joint && args.init_from.is_none() && !args.cold_start {
        return Err(Error::InvalidArgument(
            "the joint stage builds on first-stage weights: pass --init-from, or --cold-start to train from scratch".into(),
        ));
    }

    let mut model = match &args.init_from {
        Some(path) => {
            let model = checkpoint::load(path)?;
            if let Some(file_model) = &cfg.model {
                if file_model != model.config() {
                    return Err(Error::InvalidArgument(format!(
                        "model config in {} disagrees with the checkpoint {}",
                        args.config.as_ref().expect("model section implies a config file").display(),
                        path.display()
                    )));
                }
            }
            model
        }
        None => SaAsrModel::new(cfg.model.clone().unwrap_or_default(), cfg.train.seed)?,
    };

    let data_path = common::resolve_data_path(&args.data, "train.jsonl");
    let records: Vec<SampleRecord> = read_jsonl(&data_path)?;
    let vocab = model.vocab();
    let samples: Vec<MixtureSample> =
        records.iter().map(|r| r.to_sample(&vocab)).collect::<Result<_>>()?;

    common::prepare_out_dir(&args.out, args.force)?;
    let echo = TrainEcho {
        model: model.config(),
        train: &cfg.train,
        data: data_path.display().to_string(),
        init_from: args.init_from.as_ref().map(|p| p.display().to_string()),
    };
    common::echo_config(&args.out, &echo)?;

    let trace = train_loop(&mut model, &samples, &cfg.train)?;
    write_trace(&args.out.join("trace.csv"), &trace)?;
    checkpoint::save(&model, &args.out.join("checkpoint.bin"))?;

    match trace.last() {
        Some(row) => println!(
            "trained {} steps on {} samples; final loss {:.4} -> {}",
            trace.len(),
            samples.len(),
            row.loss,
            args.out.display()
        ),
        None => println!("wrote initialization untouched -> {}", args.out.display()),
    }
    Ok(ExitCode::SUCCESS)
}
