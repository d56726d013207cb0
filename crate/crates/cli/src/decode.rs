//! `decode`: beam-search every sample of a dataset with a trained
//! checkpoint. Per-sample failures are recorded and skipped, so one bad
//! sample cannot sink a long run; output order follows the sample index
//! regardless of worker scheduling.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use saasr_core::dataset::{read_jsonl, write_jsonl, DecodeRecord, SampleRecord};
use saasr_core::decode::{
    assign_speakers_argmax, assign_speakers_dedup, beam_search, decode_result, ModelScorer,
};
use saasr_core::model::checkpoint;
use saasr_core::model::SaAsrModel;
use saasr_core::sot::Vocabulary;
use saasr_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::common;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AssignmentArg {
    /// Independent per-utterance argmax over profiles.
    Argmax,
    /// Best assignment with distinct consecutive speakers.
    Dedup,
}

#[derive(Serialize)]
struct DecodeEcho {
    checkpoint: String,
    data: String,
    beam: usize,
    max_len: usize,
    speaker_assignment: AssignmentArg,
    emit_beta: bool,
}

/// One line of errors.jsonl: which sample failed and why.
#[derive(Debug, Serialize, Deserialize)]
struct ErrorRecord {
    index: usize,
    error: String,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Dataset directory (uses its test.jsonl) or an explicit JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    force: bool,
    /// Beam width (1 reproduces greedy decoding).
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Hypothesis length budget, terminator included.
    #[arg(long, default_value_t = 48)]
    max_len: usize,
    /// Speaker assignment mode.
    #[arg(long, value_enum, default_value_t = AssignmentArg::Dedup)]
    speaker_assignment: AssignmentArg,
    /// Include the full per-token posterior matrix in each record.
    #[arg(long)]
    emit_beta: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn decode_one(
    model: &SaAsrModel,
    record: &SampleRecord,
    vocab: &Vocabulary,
    args: &DecodeArgs,
) -> Result<DecodeRecord> {
    let sample = record.to_sample(vocab)?;
    let mut scorer = ModelScorer::new(model, &sample.features, &sample.profiles)?;
    let ranked = beam_search(&mut scorer, args.beam, args.max_len)?;
    let best = ranked
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("beam search returned no hypotheses".into()))?;
    let assignment = match args.speaker_assignment {
        AssignmentArg::Argmax => assign_speakers_argmax(&best, vocab)?,
        AssignmentArg::Dedup => assign_speakers_dedup(&best, vocab)?,
    };
    let result = decode_result(&best, assignment, vocab)?;
    Ok(DecodeRecord::from_result(record.index, &result, vocab, args.emit_beta))
}

pub fn run(args: &DecodeArgs) -> Result<ExitCode> {
    let model = checkpoint::load(&args.checkpoint)?;
    let vocab = model.vocab();
    let data_path = common::resolve_data_path(&args.data, "test.jsonl");
    let records: Vec<SampleRecord> = read_jsonl(&data_path)?;

    common::prepare_out_dir(&args.out, args.force)?;
    let echo = DecodeEcho {
        checkpoint: args.checkpoint.display().to_string(),
        data: data_path.display().to_string(),
        beam: args.beam,
        max_len: args.max_len,
        speaker_assignment: args.speaker_assignment,
        emit_beta: args.emit_beta,
    };
    common::echo_config(&args.out, &echo)?;

    let pool = common::thread_pool(args.jobs)?;
    let outcomes: Vec<(usize, Result<DecodeRecord>)> = pool.install(|| {
        records
            .par_iter()
            .map(|r| (r.index, decode_one(&model, r, &vocab, args)))
            .collect()
    });

    let mut decoded = Vec::with_capacity(outcomes.len());
    let mut errors = Vec::new();
    for (index, outcome) in outcomes {
        match outcome {
            Ok(record) => decoded.push(record),
            Err(e) => errors.push(ErrorRecord { index, error: e.to_string() }),
        }
    }
    decoded.sort_by_key(|r| r.index);
    errors.sort_by_key(|r| r.index);
    write_jsonl(&args.out.join("decoded.jsonl"), &decoded)?;
    write_jsonl(&args.out.join("errors.jsonl"), &errors)?;

    println!(
        "decoded {} of {} samples ({} failed) -> {}",
        decoded.len(),
        records.len(),
        errors.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
