//! `gen`: synthesize a dataset. Samples are keyed by a global index across
//! the three splits (train, then dev, then test), so the splits are
//! disjoint by construction and any sample can be regenerated in isolation.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Args;
use rayon::prelude::*;
use saasr_core::dataset::{write_jsonl, InventoryFile, SampleRecord};
use saasr_core::synth::{generate_sample, SpeakerInventory, SynthConfig};
use saasr_core::Result;
use serde::{Deserialize, Serialize};

use crate::common;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Seed for the inventory and every sample stream.
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { seed: 0, n_train: 5000, n_dev: 200, n_test: 500, synth: SynthConfig::default() }
    }
}

#[derive(Args)]
pub struct GenArgs {
    /// JSON configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    force: bool,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Split-size overrides.
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Summary written next to the splits; enough to regenerate the dataset.
#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    vocab_size: usize,
    inventory: &'a str,
    splits: [&'a str; 3],
}

pub fn run(args: &GenArgs) -> Result<ExitCode> {
    let mut cfg: GenConfig = common::load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_dev {
        cfg.n_dev = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    cfg.synth.validate()?;

    common::prepare_out_dir(&args.out, args.force)?;
    common::echo_config(&args.out, &cfg)?;

    let inventory = SpeakerInventory::generate(
        cfg.synth.inventory_speakers,
        cfg.synth.profile_dim,
        cfg.synth.feat_dim,
        cfg.synth.vocab().content_count(),
        cfg.seed,
    )?;
    InventoryFile::from_inventory(&inventory, cfg.seed).save(&args.out.join("inventory.json"))?;

    let total = cfg.n_train + cfg.n_dev + cfg.n_test;
    let pool = common::thread_pool(args.jobs)?;
    let records: Vec<SampleRecord> = pool.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| {
                generate_sample(&cfg.synth, &inventory, cfg.seed, i)
                    .map(|s| SampleRecord::from_sample(i, &s))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let (train, rest) = records.split_at(cfg.n_train);
    let (dev, test) = rest.split_at(cfg.n_dev);
    write_jsonl(&args.out.join("train.jsonl"), train)?;
    write_jsonl(&args.out.join("dev.jsonl"), dev)?;
    write_jsonl(&args.out.join("test.jsonl"), test)?;

    let manifest = Manifest {
        seed: cfg.seed,
        n_train: cfg.n_train,
        n_dev: cfg.n_dev,
        n_test: cfg.n_test,
        vocab_size: cfg.synth.vocab_size,
        inventory: "inventory.json",
        splits: ["train.jsonl", "dev.jsonl", "test.jsonl"],
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(args.out.join("manifest.json"), text)?;

    println!(
        "generated {total} samples ({} train / {} dev / {} test) in {}",
        cfg.n_train,
        cfg.n_dev,
        cfg.n_test,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
