//! Two-stage training of the joint objective.
//!
//! Stage one optimizes only the transcription path: the speaker block is
//! absent from the graph, so the objective is provably independent of the
//! profile sets. Stage two trains everything against the joint objective —
//! per token, the negative log-probability of the reference token plus a
//! weighted negative log posterior of the reference speaker.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Bindings, ParamStore};
use crate::model::{build_asr_encoder, build_decoder, build_speaker_encoder, DropoutMode, SaAsrModel};
use crate::synth::MixtureSample;
use crate::tensor::gradcheck::{central_difference, relative_error, CoordCheck};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    /// Transcription only; the profile injection is identically zero and
    /// speaker parameters receive no gradient.
    AsrOnly,
    /// Full joint objective over tokens and speaker posteriors.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Number of optimizer steps; zero is allowed and performs no updates.
    pub total_steps: usize,
    pub batch_size: usize,
    /// Zero out random time spans and a feature band on each training
    /// input. On by default only in the first stage.
    pub mask_augment: bool,
    pub speaker_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::default_for(TrainStage::AsrOnly)
    }
}

impl TrainConfig {
    /// Stage-appropriate defaults: masking is a first-stage device.
    pub fn default_for(stage: TrainStage) -> Self {
        TrainConfig {
            stage,
            peak_lr: 3e-3,
            warmup_steps: 200,
            total_steps: 1200,
            batch_size: 8,
            mask_augment: stage == TrainStage::AsrOnly,
            speaker_loss_weight: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::InvalidArgument(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.warmup_steps == 0 || (self.total_steps > 0 && self.warmup_steps > self.total_steps) {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {} must be in 1..=total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !self.speaker_loss_weight.is_finite() || self.speaker_loss_weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "speaker_loss_weight {} must be nonnegative",
                self.speaker_loss_weight
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based): a linear ramp to `peak_lr` over
/// `warmup_steps`, then inverse-square-root decay. The peak is attained
/// exactly at `step == warmup_steps`.
pub fn noam_lr(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Zeroes up to 2 random time spans (each at most 10% of the frames) and
/// up to 1 feature band (at most 25% of the features). Inputs shorter than
/// 4 frames are rejected.
pub fn mask_augment(x: &Tensor, rng: &mut StdRng) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if rows < 4 {
        return Err(Error::InvalidArgument(format!(
            "masking needs at least 4 frames, got {rows}"
        )));
    }
    let mut out = x.clone();
    let max_span = (rows / 10).max(1);
    let n_spans = rng.gen_range(0..=2usize);
    for _ in 0..n_spans {
        let len = rng.gen_range(1..=max_span);
        let start = rng.gen_range(0..=rows - len);
        out.data_mut()[start * cols..(start + len) * cols].fill(0.0);
    }
    let max_band = (cols / 4).max(1);
    if rng.gen_range(0..=1usize) == 1 {
        let width = rng.gen_range(1..=max_band.min(cols));
        let start = rng.gen_range(0..=cols - width);
        for r in 0..rows {
            out.data_mut()[r * cols + start..r * cols + start + width].fill(0.0);
        }
    }
    Ok(out)
}

/// Loss terms for a batch, all normalized by the batch's token count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// `token_loss + speaker_loss_weight * speaker_loss`.
    pub loss: f64,
    /// Mean negative log-probability of the reference tokens.
    pub token_loss: f64,
    /// Mean negative log posterior of the reference speakers (0 in the
    /// transcription-only stage).
    pub speaker_loss: f64,
    pub token_count: usize,
}

/// Builds one sample's summed (not yet normalized) loss terms on `tape`.
fn sample_loss_graph(
    tape: &mut Tape,
    binds: &mut Bindings,
    model: &SaAsrModel,
    sample: &MixtureSample,
    stage: TrainStage,
    features: &Tensor,
    mode: &mut DropoutMode,
) -> Result<(Var, Option<Var>)> {
    let store = model.params();
    let cfg = model.config();
    let vocab = model.vocab();
    sample.transcript.validate(&vocab)?;
    if let Some(&bad) = sample.transcript.speakers.iter().find(|&&s| s >= sample.profiles.rows()) {
        return Err(Error::InvalidArgument(format!(
            "speaker label {bad} outside the sample's profile set of {}",
            sample.profiles.rows()
        )));
    }
    let x = tape.leaf(features);
    let h_asr = build_asr_encoder(tape, binds, store, cfg, x, mode)?;
    let spk = match stage {
        TrainStage::AsrOnly => None,
        TrainStage::Joint => {
            let h_spk = build_speaker_encoder(tape, binds, store, cfg, x)?;
            let profiles = tape.leaf(&sample.profiles);
            Some((h_spk, profiles))
        }
    };
    let n = sample.transcript.len();
    let mut ids = Vec::with_capacity(n);
    ids.push(model.sos_id());
    ids.extend_from_slice(&sample.transcript.tokens[..n - 1]);
    let dec = build_decoder(tape, binds, store, cfg, &ids, h_asr, spk, mode)?;

    let picked = tape.gather_row_cols(dec.log_probs, &sample.transcript.tokens)?;
    let token_sum = tape.sum_all(picked);
    let spk_sum = match dec.beta {
        Some(beta) => {
            let picked = tape.gather_row_cols(beta, &sample.transcript.speakers)?;
            let logs = tape.ln(picked);
            Some(tape.sum_all(logs))
        }
        None => None,
    };
    Ok((token_sum, spk_sum))
}

/// Evaluation-mode batch loss (no dropout, no gradients).
pub fn loss(
    model: &SaAsrModel,
    batch: &[&MixtureSample],
    stage: TrainStage,
    speaker_loss_weight: f64,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss of an empty batch".into()));
    }
    let mut token_sum = 0.0;
    let mut spk_sum = 0.0;
    let mut tokens = 0usize;
    for sample in batch {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let (tok, spk) = sample_loss_graph(
            &mut tape,
            &mut binds,
            model,
            sample,
            stage,
            &sample.features,
            &mut DropoutMode::Off,
        )?;
        token_sum += tape.value(tok)[0];
        if let Some(s) = spk {
            spk_sum += tape.value(s)[0];
        }
        tokens += sample.transcript.len();
    }
    let token_loss = -token_sum / tokens as f64;
    let speaker_loss = if spk_sum == 0.0 { 0.0 } else { -spk_sum / tokens as f64 };
    Ok(LossParts {
        loss: token_loss + speaker_loss_weight * speaker_loss,
        token_loss,
        speaker_loss,
        token_count: tokens,
    })
}

/// Training-mode batch loss: applies masking/dropout as configured and
/// accumulates d(loss)/d(param) into the store's gradient buffers.
fn loss_and_grads(
    model: &mut SaAsrModel,
    batch: &[&MixtureSample],
    cfg: &TrainConfig,
    rng: &mut StdRng,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss of an empty batch".into()));
    }
    let dropout = model.config().dropout;
    let mut token_sum = 0.0;
    let mut spk_sum = 0.0;
    let mut tokens = 0usize;
    model.params_mut().zero_grads();
    for sample in batch {
        let features = if cfg.mask_augment {
            mask_augment(&sample.features, rng)?
        } else {
            sample.features.clone()
        };
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let mut mode = if dropout > 0.0 {
            DropoutMode::On { rate: dropout, rng }
        } else {
            DropoutMode::Off
        };
        let (tok, spk) =
            sample_loss_graph(&mut tape, &mut binds, model, sample, cfg.stage, &features, &mut mode)?;
        token_sum += tape.value(tok)[0];
        // Objective for this sample: -token_sum - weight * speaker_sum.
        let neg_tok = tape.scale(tok, -1.0);
        let objective = match spk {
            Some(s) => {
                spk_sum += tape.value(s)[0];
                let neg_spk = tape.scale(s, -cfg.speaker_loss_weight);
                tape.add(neg_tok, neg_spk)?
            }
            None => neg_tok,
        };
        tape.backward(objective)?;
        binds.harvest_grads(&tape, model.params_mut());
        tokens += sample.transcript.len();
    }
    // Convert summed gradients to per-token means.
    let inv = 1.0 / tokens as f64;
    scale_grads(model.params_mut(), inv);
    let token_loss = -token_sum / tokens as f64;
    let speaker_loss = if spk_sum == 0.0 { 0.0 } else { -spk_sum / tokens as f64 };
    Ok(LossParts {
        loss: token_loss + cfg.speaker_loss_weight * speaker_loss,
        token_loss,
        speaker_loss,
        token_count: tokens,
    })
}

fn scale_grads(store: &mut ParamStore, factor: f64) {
    for idx in 0..store.len() {
        if let Some(g) = store.tensor_mut(idx).grad.as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for idx in 0..store.len() {
        if let Some(g) = store.tensor_mut(idx).grad.as_ref() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        scale_grads(store, max_norm / norm);
    }
    norm
}

/// Adam with the usual bias correction. Parameters with no gradient this
/// step (e.g. the speaker block in the transcription-only stage) are
/// skipped entirely and stay exactly fixed.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|i| vec![0.0; store.entry(i).tensor.len()]).collect();
        let v = (0..store.len()).map(|i| vec![0.0; store.entry(i).tensor.len()]).collect();
        Adam { m, v, t: 0, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let tensor = store.tensor_mut(idx);
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            tensor.grad = Some(grad);
        }
    }
}

/// One loss-trace row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub token_loss: f64,
    pub speaker_loss: f64,
}

/// Writes the trace as CSV (`step,lr,loss,token_loss,speaker_loss`).
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,lr,loss,token_loss,speaker_loss")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.step, r.lr, r.loss, r.token_loss, r.speaker_loss)?;
    }
    f.flush()?;
    Ok(())
}

const CLIP_NORM: f64 = 5.0;

/// Runs `total_steps` optimizer steps over the dataset, shuffling sample
/// order every epoch from the run's seeded stream. Returns the loss trace;
/// the model is trained in place. A non-finite loss aborts with context.
pub fn train_loop(
    model: &mut SaAsrModel,
    dataset: &[MixtureSample],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut adam = Adam::new(model.params());
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let mut batch: Vec<&MixtureSample> = Vec::with_capacity(cfg.batch_size.min(dataset.len()));
        for _ in 0..cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let parts = loss_and_grads(model, &batch, cfg, &mut rng)?;
        if !parts.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "token_loss={}, speaker_loss={}",
                    parts.token_loss, parts.speaker_loss
                ),
            });
        }
        clip_global_norm(model.params_mut(), CLIP_NORM);
        let lr = noam_lr(step, cfg.peak_lr, cfg.warmup_steps);
        adam.step(model.params_mut(), lr);
        trace.push(TraceRow {
            step,
            lr,
            loss: parts.loss,
            token_loss: parts.token_loss,
            speaker_loss: parts.speaker_loss,
        });
    }
    Ok(trace)
}

/// Compares analytic parameter gradients of the evaluation-mode batch loss
/// against central differences at `n_coords` randomly chosen parameter
/// coordinates. Exercised by tests and the command-line self-test.
pub fn check_gradients(
    model: &mut SaAsrModel,
    sample: &MixtureSample,
    stage: TrainStage,
    speaker_loss_weight: f64,
    n_coords: usize,
    rng: &mut StdRng,
) -> Result<Vec<CoordCheck>> {
    let saved_dropout = model.config().dropout;
    model.set_dropout(0.0)?;
    let result =
        check_gradients_deterministic(model, sample, stage, speaker_loss_weight, n_coords, rng);
    model.set_dropout(saved_dropout)?;
    result
}

fn check_gradients_deterministic(
    model: &mut SaAsrModel,
    sample: &MixtureSample,
    stage: TrainStage,
    speaker_loss_weight: f64,
    n_coords: usize,
    rng: &mut StdRng,
) -> Result<Vec<CoordCheck>> {
    // Analytic pass without masking or dropout, so both sides of the
    // comparison see the deterministic evaluation-mode objective.
    let grad_cfg = TrainConfig {
        stage,
        mask_augment: false,
        speaker_loss_weight,
        ..TrainConfig::default_for(stage)
    };
    let mut grad_rng = StdRng::seed_from_u64(0);
    loss_and_grads(model, &[sample], &grad_cfg, &mut grad_rng)?;

    let mut picks = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let pidx = rng.gen_range(0..model.params().len());
        let entry = model.params().entry(pidx);
        let eidx = rng.gen_range(0..entry.tensor.len());
        let analytic = entry.tensor.grad.as_ref().map_or(0.0, |g| g[eidx]);
        let x0 = entry.tensor.data()[eidx];
        picks.push((pidx, eidx, entry.name.clone(), analytic, x0));
    }

    let mut checks = Vec::with_capacity(n_coords);
    for (pidx, eidx, name, analytic, x0) in picks {
        let numeric = central_difference(
            |v| {
                model.params_mut().tensor_mut(pidx).data_mut()[eidx] = v;
                let out = loss(model, &[sample], stage, speaker_loss_weight).map(|p| p.loss);
                model.params_mut().tensor_mut(pidx).data_mut()[eidx] = x0;
                out
            },
            x0,
            1e-5,
        )?;
        checks.push(CoordCheck {
            name,
            coord: eidx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(checks)
}
