//! `selftest`: checks the hand-written algorithms against independent
//! oracles at runtime — analytic gradients against central differences,
//! the constrained speaker-assignment DP against exhaustive enumeration,
//! and Hungarian-based cpWER against brute-force stream permutation. One
//! PASS/FAIL line per suite; any failure makes the process exit nonzero.

use std::process::ExitCode;

use clap::Args;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saasr_core::decode::{assign_speakers_dedup, assign_speakers_exhaustive, Hypothesis};
use saasr_core::metrics::{cpwer, cpwer_brute_force};
use saasr_core::model::{ModelConfig, SaAsrModel};
use saasr_core::sot::Vocabulary;
use saasr_core::synth::{generate_sample, SpeakerInventory, SynthConfig};
use saasr_core::tensor::gradcheck::worst;
use saasr_core::train::{check_gradients, TrainStage};
use saasr_core::Result;

#[derive(Args)]
pub struct SelftestArgs {
    /// Seed for the randomized check instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_COORDS: usize = 40;
const DP_INSTANCES: usize = 60;
const CPWER_INSTANCES: usize = 60;

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("{} {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

/// A small but structurally complete model and one mixture to probe it.
fn probe_setup(seed: u64) -> Result<(SaAsrModel, saasr_core::synth::MixtureSample)> {
    let synth = SynthConfig {
        inventory_speakers: 6,
        profile_set_size: 3,
        feat_dim: 6,
        profile_dim: 8,
        vocab_size: 12,
        min_tokens: 2,
        max_tokens: 4,
        frames_per_token: 3,
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        feat_dim: 6,
        model_dim: 16,
        profile_dim: 8,
        vocab_size: 12,
        heads: 2,
        enc_layers: 1,
        asr_layers: 2,
        spk_layers: 2,
        ff_dim: 24,
        subsample: 2,
        se_reduction: 4,
        ..ModelConfig::default()
    };
    let inventory = SpeakerInventory::generate(
        synth.inventory_speakers,
        synth.profile_dim,
        synth.feat_dim,
        synth.vocab().content_count(),
        seed,
    )?;
    let sample = generate_sample(&synth, &inventory, seed, 0)?;
    let model = SaAsrModel::new(model_cfg, seed)?;
    Ok((model, sample))
}

fn gradient_suite(stage: TrainStage, name: &str, seed: u64) -> Result<bool> {
    let (mut model, sample) = probe_setup(seed)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let checks = check_gradients(&mut model, &sample, stage, 1.0, GRAD_COORDS, &mut rng)?;
    let worst = worst(&checks).expect("at least one coordinate was checked");
    Ok(report(
        name,
        worst.rel_err < GRAD_TOLERANCE,
        format!(
            "worst relative error {:.2e} at {}[{}], tolerance {GRAD_TOLERANCE:.0e}",
            worst.rel_err, worst.name, worst.coord
        ),
    ))
}

/// A terminated hypothesis with the given utterance token counts and
/// random (normalized) per-token profile posteriors.
fn random_hypothesis(utterance_lens: &[usize], k: usize, vocab: &Vocabulary, rng: &mut StdRng) -> Hypothesis {
    let mut tokens = Vec::new();
    for (u, &len) in utterance_lens.iter().enumerate() {
        tokens.extend(std::iter::repeat(0).take(len));
        tokens.push(if u + 1 == utterance_lens.len() { vocab.eos() } else { vocab.sc() });
    }
    let beta_rows: Vec<Vec<f64>> = tokens
        .iter()
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        })
        .collect();
    Hypothesis {
        log_score: 0.0,
        token_log_probs: vec![0.0; tokens.len()],
        beta_rows,
        tokens,
        terminated: true,
    }
}

fn dedup_suite(seed: u64) -> Result<bool> {
    let vocab = Vocabulary::new(8)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0xdedu64);
    let mut worst_gap = 0.0f64;
    for _ in 0..DP_INSTANCES {
        let m = rng.gen_range(1..=6);
        let k = if m >= 2 { rng.gen_range(2..=5) } else { rng.gen_range(1..=5) };
        let lens: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=3)).collect();
        let h = random_hypothesis(&lens, k, &vocab, &mut rng);
        let dp = assign_speakers_dedup(&h, &vocab)?;
        let exhaustive = assign_speakers_exhaustive(&h, &vocab)?;
        let gap = (dp.log_score - exhaustive.log_score).abs();
        worst_gap = worst_gap.max(gap);
        if gap != 0.0 || dp.speakers.windows(2).any(|w| w[0] == w[1]) {
            return Ok(report(
                "speaker assignment DP vs exhaustive",
                false,
                format!("score gap {gap:.3e} on {m} utterances over {k} profiles"),
            ));
        }
    }
    Ok(report(
        "speaker assignment DP vs exhaustive",
        true,
        format!("{DP_INSTANCES} instances, exact score match, no adjacent repeats"),
    ))
}

fn cpwer_suite(seed: u64) -> Result<bool> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xc9e8);
    for i in 0..CPWER_INSTANCES {
        let n_ref = rng.gen_range(1..=4);
        let n_hyp = rng.gen_range(0..=4);
        let stream = |rng: &mut StdRng, min_len: usize| -> Vec<usize> {
            let len = rng.gen_range(min_len..=6);
            (0..len).map(|_| rng.gen_range(0..5)).collect()
        };
        let refs: Vec<Vec<usize>> =
            (0..n_ref).map(|j| stream(&mut rng, usize::from(j == 0))).collect();
        let hyps: Vec<Vec<usize>> = (0..n_hyp).map(|_| stream(&mut rng, 0)).collect();
        let fast = cpwer(&refs, &hyps)?;
        let brute = cpwer_brute_force(&refs, &hyps)?;
        if fast != brute {
            return Ok(report(
                "cpWER vs brute-force permutation",
                false,
                format!("instance {i}: {fast} vs {brute}"),
            ));
        }
    }
    Ok(report(
        "cpWER vs brute-force permutation",
        true,
        format!("{CPWER_INSTANCES} instances, exact match"),
    ))
}

pub fn run(args: &SelftestArgs) -> Result<ExitCode> {
    let mut all = true;
    all &= gradient_suite(TrainStage::AsrOnly, "gradient check (transcription stage)", args.seed)?;
    all &= gradient_suite(TrainStage::Joint, "gradient check (joint stage)", args.seed)?;
    all &= dedup_suite(args.seed)?;
    all &= cpwer_suite(args.seed)?;
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
