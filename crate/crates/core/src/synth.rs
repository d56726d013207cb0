//! Synthetic multi-talker mixtures.
//!
//! A fixed inventory ties every (speaker, token) pair to an emission vector
//! and every speaker to a unit-norm signature, so both the words and the
//! voices are recoverable from the features alone. Samples mix one
//! utterance from each of 1-3 distinct speakers at staggered offsets and
//! pair the result with a shuffled profile set of true speakers plus
//! distractors.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::sot::{self, SotTranscript, Utterance, Vocabulary};
use crate::tensor::Tensor;

/// Everything the generator needs to know; defaults are the desk-scale
/// companion of the default model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Speakers in the inventory.
    pub inventory_speakers: usize,
    /// Profiles per sample (true speakers plus distractors).
    pub profile_set_size: usize,
    /// Feature dimension of emissions and mixtures.
    pub feat_dim: usize,
    /// Signature / profile dimension.
    pub profile_dim: usize,
    /// Vocabulary size including the two markers.
    pub vocab_size: usize,
    /// Inclusive utterance length range in tokens.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frames each token occupies.
    pub frames_per_token: usize,
    /// Standard deviation of the additive feature noise.
    pub noise_std: f64,
    /// Minimum frame gap between consecutive utterance starts.
    pub min_delay: usize,
    /// Extra random gap drawn uniformly from `0..=max_extra_delay`.
    pub max_extra_delay: usize,
    /// Relative weights of drawing 1, 2, or 3 speakers per sample.
    pub speaker_weights: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            inventory_speakers: 16,
            profile_set_size: 8,
            feat_dim: 8,
            profile_dim: 16,
            vocab_size: 24,
            min_tokens: 3,
            max_tokens: 8,
            frames_per_token: 4,
            noise_std: 0.1,
            min_delay: 5,
            max_extra_delay: 10,
            speaker_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        if self.inventory_speakers < self.profile_set_size {
            return Err(Error::InvalidArgument(format!(
                "inventory of {} speakers cannot fill profile sets of {}",
                self.inventory_speakers, self.profile_set_size
            )));
        }
        if self.profile_set_size < 3 {
            return Err(Error::InvalidArgument(
                "profile sets need room for up to 3 true speakers".into(),
            ));
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::InvalidArgument(format!(
                "bad utterance length range {}..={}",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.frames_per_token == 0 {
            return Err(Error::InvalidArgument("frames_per_token must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidArgument(format!("bad noise std {}", self.noise_std)));
        }
        if self.feat_dim == 0 || self.profile_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if self.speaker_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.speaker_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidArgument("speaker weights must be nonnegative with positive sum".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated config")
    }
}

/// Maximum pairwise |cosine| allowed between distinct signatures.
const SIGNATURE_COS_CAP: f64 = 0.8;

/// Fixed cast of synthetic speakers.
#[derive(Debug, Clone)]
pub struct SpeakerInventory {
    /// `[n_speakers, profile_dim]`, rows unit norm.
    signatures: Tensor,
    /// `[n_speakers * content_tokens, feat_dim]`; row `s * content + t` is
    /// the emission vector of speaker `s` uttering content token `t`.
    emissions: Tensor,
    content_tokens: usize,
}

impl SpeakerInventory {
    /// Draws signatures (rejection-sampled to stay pairwise separable) and
    /// per-(speaker, token) emission vectors.
    pub fn generate(
        n_speakers: usize,
        profile_dim: usize,
        feat_dim: usize,
        content_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_speakers == 0 || profile_dim == 0 || feat_dim == 0 || content_tokens == 0 {
            return Err(Error::InvalidArgument("inventory dimensions must be positive".into()));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut signatures = Vec::with_capacity(n_speakers);
        let mut attempts = 0usize;
        while signatures.len() < n_speakers {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument(format!(
                    "could not place {n_speakers} signatures with pairwise |cos| <= {SIGNATURE_COS_CAP} in {profile_dim} dimensions"
                )));
            }
            let mut v: Vec<f64> = (0..profile_dim).map(|_| standard_normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let separable = signatures.iter().all(|s: &Vec<f64>| {
                let cos: f64 = s.iter().zip(&v).map(|(a, b)| a * b).sum();
                cos.abs() <= SIGNATURE_COS_CAP
            });
            if separable {
                signatures.push(v);
            }
        }
        let emissions: Vec<f64> = (0..n_speakers * content_tokens * feat_dim)
            .map(|_| standard_normal(&mut rng))
            .collect();
        Ok(SpeakerInventory {
            signatures: Tensor::new(vec![n_speakers, profile_dim], signatures.concat())?,
            emissions: Tensor::new(vec![n_speakers * content_tokens, feat_dim], emissions)?,
            content_tokens,
        })
    }

    pub(crate) fn from_parts(signatures: Tensor, emissions: Tensor, content_tokens: usize) -> Result<Self> {
        if signatures.shape().len() != 2 || emissions.shape().len() != 2 {
            return Err(Error::Shape("inventory tensors must be rank 2".into()));
        }
        if emissions.rows() != signatures.rows() * content_tokens {
            return Err(Error::Shape(format!(
                "{} emission rows for {} speakers x {} tokens",
                emissions.rows(),
                signatures.rows(),
                content_tokens
            )));
        }
        Ok(SpeakerInventory { signatures, emissions, content_tokens })
    }

    pub fn n_speakers(&self) -> usize {
        self.signatures.rows()
    }

    pub fn profile_dim(&self) -> usize {
        self.signatures.cols()
    }

    pub fn feat_dim(&self) -> usize {
        self.emissions.cols()
    }

    pub fn content_tokens(&self) -> usize {
        self.content_tokens
    }

    pub fn signatures(&self) -> &Tensor {
        &self.signatures
    }

    pub(crate) fn emissions(&self) -> &Tensor {
        &self.emissions
    }

    pub fn signature(&self, speaker: usize) -> Result<&[f64]> {
        if speaker >= self.n_speakers() {
            return Err(Error::InvalidArgument(format!(
                "speaker {speaker} outside inventory of {}",
                self.n_speakers()
            )));
        }
        Ok(self.signatures.row(speaker))
    }

    pub fn emission(&self, speaker: usize, token: usize) -> Result<&[f64]> {
        if speaker >= self.n_speakers() {
            return Err(Error::InvalidArgument(format!(
                "speaker {speaker} outside inventory of {}",
                self.n_speakers()
            )));
        }
        if token >= self.content_tokens {
            return Err(Error::InvalidArgument(format!(
                "token {token} is not a content token (inventory covers {})",
                self.content_tokens
            )));
        }
        Ok(self.emissions.row(speaker * self.content_tokens + token))
    }
}

/// Renders one utterance: each token contributes `frames_per_token` copies
/// of its emission vector plus Gaussian noise of the given deviation.
pub fn synth_utterance(
    inventory: &SpeakerInventory,
    speaker: usize,
    tokens: &[usize],
    frames_per_token: usize,
    noise_std: f64,
    rng: &mut StdRng,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot synthesize an empty utterance".into()));
    }
    if frames_per_token == 0 {
        return Err(Error::InvalidArgument("frames_per_token must be positive".into()));
    }
    let fa = inventory.feat_dim();
    let mut data = Vec::with_capacity(tokens.len() * frames_per_token * fa);
    for &t in tokens {
        let e = inventory.emission(speaker, t)?;
        for _ in 0..frames_per_token {
            for &v in e {
                let noise = if noise_std > 0.0 { noise_std * standard_normal(rng) } else { 0.0 };
                data.push(v + noise);
            }
        }
    }
    Tensor::new(vec![tokens.len() * frames_per_token, fa], data)
}

/// Element-wise sum of utterances placed at their offsets, zero-padded to
/// the common length. Offsets must ascend with consecutive gaps of at least
/// `min_delay` frames; levels are preserved (no rescaling).
pub fn mix(utterances: &[Tensor], offsets: &[usize], min_delay: usize) -> Result<Tensor> {
    if utterances.is_empty() || utterances.len() != offsets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} utterances with {} offsets",
            utterances.len(),
            offsets.len()
        )));
    }
    let fa = utterances[0].cols();
    if utterances.iter().any(|u| u.shape().len() != 2 || u.cols() != fa || u.rows() == 0) {
        return Err(Error::Shape("mix inputs must be nonempty matrices of one width".into()));
    }
    for w in offsets.windows(2) {
        if w[1] < w[0] + min_delay {
            return Err(Error::InvalidArgument(format!(
                "utterance offsets {} and {} violate the minimum start gap of {min_delay}",
                w[0], w[1]
            )));
        }
    }
    let total = utterances
        .iter()
        .zip(offsets)
        .map(|(u, &o)| o + u.rows())
        .max()
        .expect("nonempty");
    let mut out = Tensor::zeros(vec![total, fa]);
    for (u, &o) in utterances.iter().zip(offsets) {
        for r in 0..u.rows() {
            let src = u.row(r);
            let dst = &mut out.data_mut()[(o + r) * fa..(o + r + 1) * fa];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(out)
}

/// One generated training/evaluation example.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    /// `[frames, feat_dim]` mixed features.
    pub features: Tensor,
    /// Source utterances in start order; `transcript` is their serialization.
    pub utterances: Vec<Utterance>,
    /// Serialized transcript; speaker labels index into `profiles`.
    pub transcript: SotTranscript,
    /// `[K, profile_dim]` candidate profile set, shuffled.
    pub profiles: Tensor,
    /// Inventory ids of the true speakers, in utterance start order.
    pub true_speaker_ids: Vec<usize>,
}

fn weighted_count(weights: &[f64; 3], rng: &mut StdRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i + 1;
        }
        draw -= w;
    }
    3
}

/// Per-sample RNG stream: disjoint for distinct indices under one dataset
/// seed, so generation can be partitioned or parallelized by index.
pub fn sample_rng(dataset_seed: u64, index: usize) -> StdRng {
    StdRng::seed_from_u64(
        dataset_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

/// Generates one sample by index; the same (seed, index) pair always yields
/// the same sample regardless of batching or order.
pub fn generate_sample(
    cfg: &SynthConfig,
    inventory: &SpeakerInventory,
    dataset_seed: u64,
    index: usize,
) -> Result<MixtureSample> {
    cfg.validate()?;
    if inventory.n_speakers() < cfg.profile_set_size {
        return Err(Error::InvalidArgument(format!(
            "inventory of {} speakers cannot fill profile sets of {}",
            inventory.n_speakers(),
            cfg.profile_set_size
        )));
    }
    let vocab = cfg.vocab();
    let mut rng = sample_rng(dataset_seed, index);

    let n_spk = weighted_count(&cfg.speaker_weights, &mut rng);
    let chosen = rand::seq::index::sample(&mut rng, inventory.n_speakers(), n_spk).into_vec();

    let mut token_lists = Vec::with_capacity(n_spk);
    for _ in 0..n_spk {
        let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let tokens: Vec<usize> =
            (0..len).map(|_| rng.gen_range(0..vocab.content_count())).collect();
        token_lists.push(tokens);
    }

    let mut offsets = Vec::with_capacity(n_spk);
    let mut at = 0usize;
    for i in 0..n_spk {
        if i > 0 {
            at += cfg.min_delay + rng.gen_range(0..=cfg.max_extra_delay);
        }
        offsets.push(at);
    }

    let mut feats = Vec::with_capacity(n_spk);
    for (speaker, tokens) in chosen.iter().zip(&token_lists) {
        feats.push(synth_utterance(
            inventory,
            *speaker,
            tokens,
            cfg.frames_per_token,
            cfg.noise_std,
            &mut rng,
        )?);
    }
    let features = mix(&feats, &offsets, cfg.min_delay)?;

    // Profile set: true speakers plus distractors from the rest of the
    // inventory, order shuffled so position carries no information.
    let mut pool: Vec<usize> =
        (0..inventory.n_speakers()).filter(|s| !chosen.contains(s)).collect();
    pool.shuffle(&mut rng);
    let mut profile_speakers = chosen.clone();
    profile_speakers.extend(pool.into_iter().take(cfg.profile_set_size - n_spk));
    profile_speakers.shuffle(&mut rng);

    let mut profile_data = Vec::with_capacity(cfg.profile_set_size * inventory.profile_dim());
    for &s in &profile_speakers {
        profile_data.extend_from_slice(inventory.signature(s)?);
    }
    let profiles =
        Tensor::new(vec![cfg.profile_set_size, inventory.profile_dim()], profile_data)?;

    let mut utterances: Vec<Utterance> = chosen
        .iter()
        .zip(&token_lists)
        .zip(&offsets)
        .map(|((speaker, tokens), &start)| Utterance {
            tokens: tokens.clone(),
            speaker_id: profile_speakers.iter().position(|s| s == speaker).expect("true speaker is in its own profile set"),
            start_frame: start,
        })
        .collect();
    utterances.sort_by_key(|u| (u.start_frame, u.speaker_id));
    let transcript = sot::serialize(&utterances, &vocab)?;

    Ok(MixtureSample { features, utterances, transcript, profiles, true_speaker_ids: chosen })
}

/// Generates `n_samples` samples for indices `0..n_samples`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    inventory: &SpeakerInventory,
    dataset_seed: u64,
    n_samples: usize,
) -> Result<Vec<MixtureSample>> {
    (0..n_samples).map(|i| generate_sample(cfg, inventory, dataset_seed, i)).collect()
}
