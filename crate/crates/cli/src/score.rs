//! `score`: join decode output with its reference dataset by sample index
//! and produce the per-condition evaluation report, the counting confusion
//! matrix, and optionally cpWER, as both JSON and a plain-text table
//! derived from the same numbers.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Args;
use rayon::prelude::*;
use saasr_core::dataset::{read_jsonl, DecodeRecord, SampleRecord};
use saasr_core::metrics::{cpwer_counts, ConditionScores, EvalReport};
use saasr_core::{Error, Result};
use serde::Serialize;

use crate::common;

#[derive(Serialize)]
struct ScoreEcho {
    refs: String,
    hyps: String,
    cpwer: bool,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Reference dataset: directory (uses its test.jsonl) or a JSONL file.
    #[arg(long)]
    refs: PathBuf,
    /// Decode output: directory (uses its decoded.jsonl) or a JSONL file.
    #[arg(long)]
    hyps: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    force: bool,
    /// Also compute cpWER over per-speaker concatenated streams.
    #[arg(long)]
    cpwer: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// One condition's counts and derived rates, as emitted in report.json.
#[derive(Serialize)]
struct ConditionView {
    samples: usize,
    ref_words: usize,
    ref_utterances: usize,
    wer_errors: usize,
    sa_wer_errors: usize,
    ser_errors: usize,
    wer: Option<f64>,
    sa_wer: Option<f64>,
    ser: Option<f64>,
}

impl ConditionView {
    fn of(c: &ConditionScores) -> Self {
        ConditionView {
            samples: c.samples,
            ref_words: c.ref_words,
            ref_utterances: c.ref_utterances,
            wer_errors: c.wer_errors,
            sa_wer_errors: c.sa_wer_errors,
            ser_errors: c.ser_errors,
            wer: c.wer(),
            sa_wer: c.sa_wer(),
            ser: c.ser(),
        }
    }
}

#[derive(Serialize)]
struct CpwerView {
    errors: usize,
    ref_words: usize,
    rate: f64,
}

/// The full report.json payload: every number in the text table plus the
/// raw counts it was derived from.
#[derive(Serialize)]
struct ReportView {
    by_condition: Vec<ConditionView>,
    total: ConditionView,
    counting_counts: [[usize; 4]; 3],
    counting_percent: [[f64; 4]; 3],
    counting_accuracy: [Option<f64>; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    cpwer: Option<CpwerView>,
}

/// Speaker-attributed utterance pairs plus the estimated speaker count,
/// extracted from one (reference, hypothesis) line pair.
struct SamplePair {
    refs: Vec<(Vec<usize>, usize)>,
    hyps: Vec<(Vec<usize>, usize)>,
    estimated: usize,
    cpwer: Option<(usize, usize)>,
}

fn concat_streams(utterances: &[(Vec<usize>, usize)]) -> Vec<Vec<usize>> {
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (tokens, speaker) in utterances {
        by_speaker.entry(*speaker).or_default().extend_from_slice(tokens);
    }
    by_speaker.into_values().collect()
}

fn pair_sample(r: &SampleRecord, h: &DecodeRecord, with_cpwer: bool) -> Result<SamplePair> {
    let mut ref_utts: Vec<&saasr_core::dataset::UtteranceData> = r.utterances.iter().collect();
    ref_utts.sort_by_key(|u| (u.start_frame, u.speaker_id));
    let refs: Vec<(Vec<usize>, usize)> =
        ref_utts.iter().map(|u| (u.tokens.clone(), u.speaker_id)).collect();
    let hyps: Vec<(Vec<usize>, usize)> =
        h.utterances.iter().map(|u| (u.tokens.clone(), u.speaker_id)).collect();
    let cpwer = if with_cpwer {
        Some(cpwer_counts(&concat_streams(&refs), &concat_streams(&hyps))?)
    } else {
        None
    };
    Ok(SamplePair { refs, hyps, estimated: h.speaker_count.distinct, cpwer })
}

/// Requires the two files to cover exactly the same sample indices, once
/// each; the error lists every offending index.
fn join<'a>(
    refs: &'a [SampleRecord],
    hyps: &'a [DecodeRecord],
) -> Result<Vec<(&'a SampleRecord, &'a DecodeRecord)>> {
    let mut by_index: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in refs {
        by_index.entry(r.index).or_insert((0, 0)).0 += 1;
    }
    for h in hyps {
        by_index.entry(h.index).or_insert((0, 0)).1 += 1;
    }
    let offenders: Vec<String> = by_index
        .iter()
        .filter(|(_, &(r, h))| r != 1 || h != 1)
        .map(|(i, &(r, h))| format!("{i} (refs x{r}, hyps x{h})"))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::IdMismatch(format!(
            "{} sample indices do not line up one-to-one: {}",
            offenders.len(),
            offenders.join(", ")
        )));
    }
    let ref_map: BTreeMap<usize, &SampleRecord> = refs.iter().map(|r| (r.index, r)).collect();
    Ok(hyps.iter().map(|h| (ref_map[&h.index], h)).collect())
}

pub fn run(args: &ScoreArgs) -> Result<ExitCode> {
    let refs_path = common::resolve_data_path(&args.refs, "test.jsonl");
    let hyps_path = common::resolve_data_path(&args.hyps, "decoded.jsonl");
    let refs: Vec<SampleRecord> = read_jsonl(&refs_path)?;
    let hyps: Vec<DecodeRecord> = read_jsonl(&hyps_path)?;
    let joined = join(&refs, &hyps)?;
    if joined.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }

    common::prepare_out_dir(&args.out, args.force)?;
    let echo = ScoreEcho {
        refs: refs_path.display().to_string(),
        hyps: hyps_path.display().to_string(),
        cpwer: args.cpwer,
    };
    common::echo_config(&args.out, &echo)?;

    let pool = common::thread_pool(args.jobs)?;
    let pairs: Vec<SamplePair> = pool.install(|| {
        joined
            .par_iter()
            .map(|(r, h)| pair_sample(r, h, args.cpwer))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut report = EvalReport::new();
    let mut cpwer_errors = 0usize;
    let mut cpwer_words = 0usize;
    for pair in &pairs {
        report.add_sample(&pair.refs, &pair.hyps, pair.estimated)?;
        if let Some((e, w)) = pair.cpwer {
            cpwer_errors += e;
            cpwer_words += w;
        }
    }

    let view = ReportView {
        by_condition: report.by_condition.iter().map(ConditionView::of).collect(),
        total: ConditionView::of(&report.total),
        counting_counts: *report.counting.counts(),
        counting_percent: report.counting.percentages(),
        counting_accuracy: [1, 2, 3].map(|a| report.counting.accuracy(a)),
        cpwer: args.cpwer.then(|| CpwerView {
            errors: cpwer_errors,
            ref_words: cpwer_words,
            rate: cpwer_errors as f64 / cpwer_words as f64,
        }),
    };
    let mut json = serde_json::to_string_pretty(&view)?;
    json.push('\n');
    fs::write(args.out.join("report.json"), json)?;

    let mut table = report.render_text();
    if let Some(c) = &view.cpwer {
        table.push_str(&format!("\ncpWER {:8.2}\n", 100.0 * c.rate));
    }
    fs::write(args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}
