//! Optimizer, schedule, loss, and training-loop tests on a deliberately
//! small model so every case runs in seconds.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saasr_core::error::Error;
use saasr_core::model::params::ParamStore;
use saasr_core::model::{ModelConfig, SaAsrModel};
use saasr_core::synth::{generate_dataset, MixtureSample, SpeakerInventory, SynthConfig};
use saasr_core::tensor::Tensor;
use saasr_core::train::{
    check_gradients, clip_global_norm, loss, mask_augment, noam_lr, train_loop, write_trace, Adam,
    TraceRow, TrainConfig, TrainStage,
};

fn small_model_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        model_dim: 16,
        profile_dim: 16,
        vocab_size: 24,
        heads: 2,
        enc_layers: 1,
        asr_layers: 2,
        spk_layers: 2,
        ff_dim: 24,
        subsample: 2,
        conv_kernel: 3,
        se_reduction: 4,
        dropout: 0.0,
    }
}

fn dataset(n: usize, seed: u64) -> Vec<MixtureSample> {
    let cfg = SynthConfig { max_tokens: 5, ..SynthConfig::default() };
    let inv = SpeakerInventory::generate(
        cfg.inventory_speakers,
        cfg.profile_dim,
        cfg.feat_dim,
        cfg.vocab().content_count(),
        7,
    )
    .unwrap();
    generate_dataset(&cfg, &inv, seed, n).unwrap()
}

/// Snapshots every parameter whose name starts with `prefix` as raw bits.
fn param_bits(model: &SaAsrModel, prefix: &str) -> Vec<(String, Vec<u64>)> {
    model
        .params()
        .entries()
        .filter(|e| e.name.starts_with(prefix))
        .map(|e| (e.name.clone(), e.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn schedule_ramps_then_decays() {
    assert_eq!(noam_lr(200, 3e-3, 200), 3e-3, "peak attained exactly at warmup");
    assert_eq!(noam_lr(1, 3e-3, 200), 3e-3 / 200.0);
    assert_eq!(noam_lr(50, 3e-3, 200), 3e-3 * 0.25);
    assert_eq!(noam_lr(800, 3e-3, 200), 3e-3 * 0.5, "inverse-sqrt decay past warmup");
    for s in 1..200 {
        assert!(noam_lr(s, 3e-3, 200) < noam_lr(s + 1, 3e-3, 200));
    }
    for s in 200..1000 {
        assert!(noam_lr(s, 3e-3, 200) > noam_lr(s + 1, 3e-3, 200));
    }
}

#[test]
fn config_defaults_and_validation() {
    let asr = TrainConfig::default_for(TrainStage::AsrOnly);
    assert!(asr.validate().is_ok());
    assert!(asr.mask_augment, "masking defaults on for the first stage");
    let joint = TrainConfig::default_for(TrainStage::Joint);
    assert!(!joint.mask_augment, "masking defaults off for the joint stage");

    let base = TrainConfig::default();
    assert!(TrainConfig { peak_lr: 0.0, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { peak_lr: -1e-3, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { peak_lr: f64::NAN, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { warmup_steps: 0, ..base.clone() }.validate().is_err());
    assert!(
        TrainConfig { warmup_steps: 1201, ..base.clone() }.validate().is_err(),
        "warmup cannot exceed a positive step budget"
    );
    assert!(
        TrainConfig { warmup_steps: 5, total_steps: 0, ..base.clone() }.validate().is_ok(),
        "a zero-step run is a legal no-op"
    );
    assert!(TrainConfig { batch_size: 0, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { speaker_loss_weight: -0.1, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { speaker_loss_weight: f64::NAN, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { speaker_loss_weight: 0.0, ..base }.validate().is_ok());
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let cfg = TrainConfig { stage: TrainStage::Joint, peak_lr: 1e-3, seed: 17, ..TrainConfig::default() };
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"joint\""));
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);

    let partial: TrainConfig = serde_json::from_str(r#"{"peak_lr": 0.001}"#).unwrap();
    assert_eq!(partial.peak_lr, 1e-3);
    assert_eq!(partial.stage, TrainStage::AsrOnly);
    assert_eq!(partial.warmup_steps, TrainConfig::default().warmup_steps);

    assert!(serde_json::from_str::<TrainConfig>(r#"{"peak": 0.001}"#).is_err());
}

#[test]
fn masking_only_zeroes_and_stays_bounded() {
    let mut rng = StdRng::seed_from_u64(3);
    let data: Vec<f64> = (0..640).map(|_| rng.gen_range(0.5..1.5)).collect();
    let x = Tensor::new(vec![40, 16], data).unwrap();

    let mut a = StdRng::seed_from_u64(8);
    let mut b = StdRng::seed_from_u64(8);
    let ya = mask_augment(&x, &mut a).unwrap();
    let yb = mask_augment(&x, &mut b).unwrap();
    assert_eq!(ya.data(), yb.data(), "same stream, same mask");

    let mut identity_seen = false;
    let mut masked_seen = false;
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..300 {
        let y = mask_augment(&x, &mut rng).unwrap();
        let mut zeros = 0usize;
        for (orig, new) in x.data().iter().zip(y.data()) {
            assert!(*new == *orig || *new == 0.0, "masking may only zero entries");
            if *new == 0.0 {
                zeros += 1;
            }
        }
        // Worst case: two 4-row spans plus one 4-column band.
        assert!(zeros <= 2 * 4 * 16 + 4 * 40);
        identity_seen |= zeros == 0;
        masked_seen |= zeros > 0;
    }
    assert!(identity_seen && masked_seen);

    let short = Tensor::new(vec![3, 16], vec![1.0; 48]).unwrap();
    assert!(mask_augment(&short, &mut rng).is_err());
}

#[test]
fn untrained_uniform_outputs_hit_the_entropy_floor() {
    let samples = dataset(2, 21);
    let mut model = SaAsrModel::new(small_model_config(), 3).unwrap();
    // Zeroing the output projection makes every token distribution uniform;
    // zeroing the query projection does the same for speaker posteriors.
    for name in ["out.w", "out.b", "spk_query.w"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let batch: Vec<&MixtureSample> = samples.iter().collect();

    let parts = loss(&model, &batch, TrainStage::AsrOnly, 1.0).unwrap();
    assert!((parts.token_loss - 24f64.ln()).abs() < 1e-12);
    assert_eq!(parts.speaker_loss, 0.0);
    assert_eq!(parts.loss, parts.token_loss);
    assert_eq!(parts.token_count, samples.iter().map(|s| s.transcript.len()).sum::<usize>());

    let parts = loss(&model, &batch, TrainStage::Joint, 2.0).unwrap();
    assert!((parts.token_loss - 24f64.ln()).abs() < 1e-12);
    let k = samples[0].profiles.rows() as f64;
    assert!((parts.speaker_loss - k.ln()).abs() < 1e-12);
    assert!((parts.loss - (parts.token_loss + 2.0 * parts.speaker_loss)).abs() < 1e-15);
}

#[test]
fn batch_loss_is_the_token_weighted_mean() {
    let samples = dataset(2, 22);
    let model = SaAsrModel::new(small_model_config(), 5).unwrap();
    let a = loss(&model, &[&samples[0]], TrainStage::Joint, 1.0).unwrap();
    let b = loss(&model, &[&samples[1]], TrainStage::Joint, 1.0).unwrap();
    let ab = loss(&model, &[&samples[0], &samples[1]], TrainStage::Joint, 1.0).unwrap();
    let (na, nb) = (a.token_count as f64, b.token_count as f64);
    let want = (a.loss * na + b.loss * nb) / (na + nb);
    assert!((ab.loss - want).abs() < 1e-12);
    assert_eq!(ab.token_count, a.token_count + b.token_count);

    assert!(loss(&model, &[], TrainStage::Joint, 1.0).is_err());
}

#[test]
fn loss_rejects_bad_labels_and_transcripts() {
    let samples = dataset(1, 23);
    let model = SaAsrModel::new(small_model_config(), 5).unwrap();

    let mut out_of_range = samples[0].clone();
    let k = out_of_range.profiles.rows();
    out_of_range.transcript.speakers.iter_mut().for_each(|s| *s = k);
    assert!(loss(&model, &[&out_of_range], TrainStage::AsrOnly, 1.0).is_err());
    assert!(loss(&model, &[&out_of_range], TrainStage::Joint, 1.0).is_err());

    let mut truncated = samples[0].clone();
    truncated.transcript.tokens.pop();
    truncated.transcript.speakers.pop();
    assert!(loss(&model, &[&truncated], TrainStage::Joint, 1.0).is_err(), "no terminator");
}

#[test]
fn first_stage_objective_ignores_profiles() {
    let samples = dataset(1, 24);
    let model = SaAsrModel::new(small_model_config(), 9).unwrap();
    let mut scrambled = samples[0].clone();
    let mut rng = StdRng::seed_from_u64(40);
    let junk: Vec<f64> = (0..scrambled.profiles.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    scrambled.profiles = Tensor::new(scrambled.profiles.shape().to_vec(), junk).unwrap();

    let a = loss(&model, &[&samples[0]], TrainStage::AsrOnly, 1.0).unwrap();
    let b = loss(&model, &[&scrambled], TrainStage::AsrOnly, 1.0).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "profiles are unreachable in stage one");

    let a = loss(&model, &[&samples[0]], TrainStage::Joint, 1.0).unwrap();
    let b = loss(&model, &[&scrambled], TrainStage::Joint, 1.0).unwrap();
    assert_ne!(a.loss, b.loss, "the joint objective must react to profiles");
}

#[test]
fn adam_first_steps_are_sign_steps() {
    // With zero state, bias correction makes the first update exactly
    // lr * g / (|g| + eps); a constant gradient keeps that form.
    let mut store = ParamStore::new();
    store.register("a", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
    store.register("frozen", Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store);
    assert_eq!((adam.beta1, adam.beta2, adam.eps), (0.9, 0.98, 1e-9));

    store.get_mut("a").unwrap().grad = Some(vec![0.5, -0.5]);
    adam.step(&mut store, 0.1);
    let a = store.get("a").unwrap().data();
    assert!((a[0] - 0.9).abs() < 1e-8);
    assert!((a[1] + 1.9).abs() < 1e-8);
    assert_eq!(store.get("frozen").unwrap().data()[0], 5.0, "no gradient, no movement");

    adam.step(&mut store, 0.1);
    let a = store.get("a").unwrap().data();
    assert!((a[0] - 0.8).abs() < 1e-8);
    assert!((a[1] + 1.8).abs() < 1e-8);
}

#[test]
fn adam_with_zero_lr_is_an_identity() {
    let mut store = ParamStore::new();
    store.register("a", Tensor::new(vec![1, 2], vec![1.25, -0.75]).unwrap()).unwrap();
    store.get_mut("a").unwrap().grad = Some(vec![3.0, -4.0]);
    let mut adam = Adam::new(&store);
    adam.step(&mut store, 0.0);
    let a = store.get("a").unwrap().data();
    assert_eq!((a[0].to_bits(), a[1].to_bits()), (1.25f64.to_bits(), (-0.75f64).to_bits()));
}

#[test]
fn clipping_rescales_to_the_global_norm() {
    let mut store = ParamStore::new();
    store.register("a", Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
    store.register("b", Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
    store.register("c", Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
    store.get_mut("a").unwrap().grad = Some(vec![3.0]);
    store.get_mut("b").unwrap().grad = Some(vec![4.0]);

    assert_eq!(clip_global_norm(&mut store, 5.0), 5.0);
    assert_eq!(store.get("a").unwrap().grad.as_ref().unwrap()[0], 3.0, "at the limit: untouched");

    let norm = clip_global_norm(&mut store, 2.5);
    assert_eq!(norm, 5.0, "returns the pre-clip norm");
    assert!((store.get("a").unwrap().grad.as_ref().unwrap()[0] - 1.5).abs() < 1e-15);
    assert!((store.get("b").unwrap().grad.as_ref().unwrap()[0] - 2.0).abs() < 1e-15);
    assert!(store.get("c").unwrap().grad.is_none());
}

#[test]
fn zero_step_run_reports_nothing_and_moves_nothing() {
    let samples = dataset(2, 25);
    let mut model = SaAsrModel::new(small_model_config(), 6).unwrap();
    let before = param_bits(&model, "");
    let cfg = TrainConfig {
        total_steps: 0,
        warmup_steps: 1,
        mask_augment: false,
        ..TrainConfig::default()
    };
    let trace = train_loop(&mut model, &samples, &cfg).unwrap();
    assert!(trace.is_empty());
    assert_eq!(param_bits(&model, ""), before);

    assert!(train_loop(&mut model, &[], &cfg).is_err(), "empty dataset");
}

#[test]
fn training_is_bit_reproducible_per_seed() {
    let samples = dataset(6, 26);
    let mut config = small_model_config();
    config.dropout = 0.1; // exercise the stochastic paths too
    let cfg = TrainConfig {
        stage: TrainStage::Joint,
        peak_lr: 1e-3,
        warmup_steps: 4,
        total_steps: 12,
        batch_size: 2,
        mask_augment: true,
        speaker_loss_weight: 1.0,
        seed: 5,
    };

    let mut m1 = SaAsrModel::new(config.clone(), 5).unwrap();
    let mut m2 = SaAsrModel::new(config.clone(), 5).unwrap();
    let t1 = train_loop(&mut m1, &samples, &cfg).unwrap();
    let t2 = train_loop(&mut m2, &samples, &cfg).unwrap();
    assert_eq!(t1.len(), 12);
    for (a, b) in t1.iter().zip(&t2) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
    assert_eq!(param_bits(&m1, ""), param_bits(&m2, ""));

    let mut m3 = SaAsrModel::new(config, 5).unwrap();
    let t3 = train_loop(&mut m3, &samples, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert!(
        t1.iter().zip(&t3).any(|(a, b)| a.loss != b.loss),
        "a different data order must change the trace"
    );
}

#[test]
fn first_stage_freezes_every_speaker_parameter() {
    let samples = dataset(4, 27);
    let mut model = SaAsrModel::new(small_model_config(), 8).unwrap();
    let spk_before: Vec<_> = ["spk_enc.", "spk_dec.", "spk_query", "spk_inject"]
        .iter()
        .map(|p| param_bits(&model, p))
        .collect();
    assert!(spk_before.iter().map(|v| v.len()).sum::<usize>() > 0);
    let out_before = param_bits(&model, "out.");

    let cfg = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 2,
        total_steps: 5,
        batch_size: 2,
        mask_augment: false,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &samples, &cfg).unwrap();

    let spk_after: Vec<_> = ["spk_enc.", "spk_dec.", "spk_query", "spk_inject"]
        .iter()
        .map(|p| param_bits(&model, p))
        .collect();
    assert_eq!(spk_before, spk_after, "speaker parameters stay bit-identical in stage one");
    assert_ne!(out_before, param_bits(&model, "out."), "transcription parameters must move");
}

#[test]
fn joint_stage_moves_speaker_parameters() {
    let samples = dataset(4, 28);
    let mut model = SaAsrModel::new(small_model_config(), 8).unwrap();
    let before = param_bits(&model, "spk_query");
    let cfg = TrainConfig {
        stage: TrainStage::Joint,
        peak_lr: 1e-3,
        warmup_steps: 2,
        total_steps: 5,
        batch_size: 2,
        mask_augment: false,
        speaker_loss_weight: 1.0,
        seed: 0,
    };
    let trace = train_loop(&mut model, &samples, &cfg).unwrap();
    assert!(trace.iter().all(|r| r.speaker_loss > 0.0));
    assert_ne!(before, param_bits(&model, "spk_query"));
}

#[test]
fn training_shrinks_the_loss_on_one_sample() {
    let samples = dataset(1, 29);
    let mut model = SaAsrModel::new(small_model_config(), 10).unwrap();
    let cfg = TrainConfig {
        peak_lr: 2e-3,
        warmup_steps: 20,
        total_steps: 150,
        batch_size: 1,
        mask_augment: false,
        ..TrainConfig::default()
    };
    let trace = train_loop(&mut model, &samples, &cfg).unwrap();
    let (first, last) = (trace.first().unwrap().loss, trace.last().unwrap().loss);
    assert!(last.is_finite() && first.is_finite());
    assert!(last < 0.5 * first, "memorizing one sample: {first} -> {last}");
    assert!(last < 1.0, "final loss {last} should be far below the uniform floor");
}

#[test]
fn non_finite_losses_abort_with_the_failing_step() {
    let samples = dataset(1, 30);
    let mut model = SaAsrModel::new(small_model_config(), 11).unwrap();
    model.params_mut().get_mut("out.b").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        warmup_steps: 1,
        total_steps: 3,
        batch_size: 1,
        mask_augment: false,
        ..TrainConfig::default()
    };
    match train_loop(&mut model, &samples, &cfg) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite-loss abort, got {other:?}"),
    }
}

#[test]
fn trace_csv_is_exactly_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rows = vec![
        TraceRow { step: 1, lr: 0.00015, loss: 3.5, token_loss: 3.5, speaker_loss: 0.0 },
        TraceRow { step: 2, lr: 3e-4, loss: 3.25, token_loss: 3.0, speaker_loss: 0.25 },
    ];
    write_trace(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines,
        vec!["step,lr,loss,token_loss,speaker_loss", "1,0.00015,3.5,3.5,0", "2,0.0003,3.25,3,0.25"]
    );
}

#[test]
fn parameter_gradients_match_central_differences() {
    let samples = dataset(1, 31);
    let mut model = SaAsrModel::new(small_model_config(), 12).unwrap();
    model.set_dropout(0.2).unwrap(); // the checker must neutralize and restore this
    let mut rng = StdRng::seed_from_u64(5);
    for stage in [TrainStage::AsrOnly, TrainStage::Joint] {
        let checks = check_gradients(&mut model, &samples[0], stage, 1.0, 12, &mut rng).unwrap();
        assert_eq!(checks.len(), 12);
        for c in checks {
            if (c.analytic - c.numeric).abs() < 1e-9 {
                continue; // both sides vanish; the ratio is roundoff noise
            }
            assert!(
                c.rel_err < 1e-3,
                "{stage:?} {}[{}]: analytic {} vs numeric {} (rel {})",
                c.name,
                c.coord,
                c.analytic,
                c.numeric,
                c.rel_err
            );
        }
    }
    assert_eq!(model.config().dropout, 0.2);
}
