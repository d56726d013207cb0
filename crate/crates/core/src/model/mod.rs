//! The speaker-attributed ASR network.
//!
//! Four blocks share one forward pass: an ASR conformer encoder and a
//! convolutional speaker encoder both consume the feature mixture at the
//! same subsampling rate; a transformer ASR decoder emits token
//! distributions; a speaker decoder turns the ASR decoder's first-layer
//! state into a query whose cosine similarity against the candidate profile
//! set yields per-token profile posteriors. The posterior-weighted profile
//! is injected back into the ASR decoder's first feed-forward, coupling
//! transcription and speaker identity in both directions.

pub mod checkpoint;
pub mod params;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::sot::{SotTranscript, Vocabulary};
use crate::tensor::nn::{
    causal_mask, conv1d, feed_forward, glu, multi_head_attention, pointwise_conv1d,
    sinusoidal_positions, squeeze_excite, subsampled_len, AttnParams,
};
use crate::tensor::{Tape, Tensor, Var};
use params::{Bindings, ParamStore};

/// Structural hyperparameters. The defaults are the desk-scale configuration
/// every test and pipeline default uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input feature dimension per frame.
    pub feat_dim: usize,
    /// Hidden width shared by encoders and decoders.
    pub model_dim: usize,
    /// Speaker profile (and query) dimension.
    pub profile_dim: usize,
    /// Token inventory size including the two reserved markers.
    pub vocab_size: usize,
    pub heads: usize,
    /// Conformer blocks in the ASR encoder.
    pub enc_layers: usize,
    /// ASR decoder layers; the first one hosts the profile injection.
    pub asr_layers: usize,
    /// Speaker decoder layers; the first one has no self-attention.
    pub spk_layers: usize,
    pub ff_dim: usize,
    /// Time reduction factor of the encoder front-ends (power of two).
    pub subsample: usize,
    /// Kernel size of every temporal convolution (odd).
    pub conv_kernel: usize,
    /// Squeeze-and-excitation bottleneck divisor.
    pub se_reduction: usize,
    /// Dropout rate used after sublayers during training only.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 8,
            model_dim: 32,
            profile_dim: 16,
            vocab_size: 24,
            heads: 4,
            enc_layers: 2,
            asr_layers: 2,
            spk_layers: 2,
            ff_dim: 64,
            subsample: 4,
            conv_kernel: 3,
            se_reduction: 8,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.asr_layers < 2 || self.spk_layers < 2 {
            return Err(Error::InvalidArgument(
                "both decoders need at least 2 layers: the first layer of each is structurally special".into(),
            ));
        }
        if self.enc_layers == 0 {
            return Err(Error::InvalidArgument("enc_layers must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidArgument("vocab_size must leave room for content tokens".into()));
        }
        if self.subsample < 2 || !self.subsample.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "subsample {} must be a power of two >= 2",
                self.subsample
            )));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::InvalidArgument(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.se_reduction == 0 || self.model_dim % self.se_reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "se_reduction {} must divide model_dim {}",
                self.se_reduction, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.feat_dim == 0 || self.profile_dim == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidArgument("all dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated config has a legal vocabulary")
    }

    /// Number of stride-2 stages in the subsampling front-end.
    fn sub_stages(&self) -> usize {
        self.subsample.trailing_zeros() as usize
    }
}

/// Frozen per-input encoder products.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `[l_h, model_dim]` ASR memory.
    pub h_asr: Tensor,
    /// `[l_h, model_dim]` per-frame speaker features, same geometry.
    pub h_spk: Tensor,
}

/// Everything the decoder emits for one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Token distribution over the vocabulary, sums to 1.
    pub token_probs: Vec<f64>,
    /// Log of `token_probs`, computed stably from the logits.
    pub token_log_probs: Vec<f64>,
    /// Speaker query of dimension `profile_dim`.
    pub query: Vec<f64>,
    /// Profile posteriors over the sample's profile set, sums to 1.
    pub profile_posteriors: Vec<f64>,
    /// Posterior-weighted profile vector (convex combination of profiles).
    pub weighted_profile: Vec<f64>,
    /// First-layer post-self-attention ASR decoder state for this step.
    pub asr_self_state: Vec<f64>,
}

/// Teacher-forced decoder products for a whole prefix.
#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// `[n, vocab]` per-position token log-probabilities.
    pub log_probs: Tensor,
    /// `[n, K]` profile posteriors; absent on the profile-free path.
    pub beta: Option<Tensor>,
    /// `[n, profile_dim]` speaker queries; absent on the profile-free path.
    pub queries: Option<Tensor>,
    /// `[n, profile_dim]` weighted profiles; absent on the profile-free path.
    pub weighted_profiles: Option<Tensor>,
    /// `[n, model_dim]` first-layer post-self-attention ASR states.
    pub asr_self_states: Tensor,
}

impl DecoderOutputs {
    /// Exponentiates the stored log-probabilities.
    pub fn token_probs(&self) -> Tensor {
        let data: Vec<f64> = self.log_probs.data().iter().map(|v| v.exp()).collect();
        Tensor::new(self.log_probs.shape().to_vec(), data).expect("same shape")
    }
}

/// Dropout plumbing threaded through the graph builders; `Off` for
/// evaluation, `On` during training with the run's RNG stream.
pub(crate) enum DropoutMode<'a> {
    Off,
    On { rate: f64, rng: &'a mut StdRng },
}

fn drop_layer(tape: &mut Tape, x: Var, mode: &mut DropoutMode) -> Result<Var> {
    match mode {
        DropoutMode::Off => Ok(x),
        DropoutMode::On { rate, rng } => tape.dropout(x, *rate, rng),
    }
}

fn norm(tape: &mut Tape, b: &mut Bindings, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.var(tape, s, &format!("{prefix}.gain"))?;
    let bias = b.var(tape, s, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias)
}

fn attn(tape: &mut Tape, b: &mut Bindings, s: &ParamStore, prefix: &str) -> Result<AttnParams> {
    Ok(AttnParams {
        wq: b.var(tape, s, &format!("{prefix}.wq"))?,
        bq: b.var(tape, s, &format!("{prefix}.bq"))?,
        wk: b.var(tape, s, &format!("{prefix}.wk"))?,
        bk: b.var(tape, s, &format!("{prefix}.bk"))?,
        wv: b.var(tape, s, &format!("{prefix}.wv"))?,
        bv: b.var(tape, s, &format!("{prefix}.bv"))?,
        wo: b.var(tape, s, &format!("{prefix}.wo"))?,
        bo: b.var(tape, s, &format!("{prefix}.bo"))?,
    })
}

fn ff(tape: &mut Tape, b: &mut Bindings, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = b.var(tape, s, &format!("{prefix}.w1"))?;
    let b1 = b.var(tape, s, &format!("{prefix}.b1"))?;
    let w2 = b.var(tape, s, &format!("{prefix}.w2"))?;
    let b2 = b.var(tape, s, &format!("{prefix}.b2"))?;
    feed_forward(tape, x, w1, b1, w2, b2)
}

/// Shared stride-2 convolution front-end; maps `[l_a, feat]` to
/// `[ceil(l_a/subsample), model_dim]`.
fn build_subsampler(
    tape: &mut Tape,
    b: &mut Bindings,
    s: &ParamStore,
    cfg: &ModelConfig,
    scope: &str,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for stage in 0..cfg.sub_stages() {
        let w = b.var(tape, s, &format!("{scope}.sub{stage}.w"))?;
        let bias = b.var(tape, s, &format!("{scope}.sub{stage}.b"))?;
        h = conv1d(tape, h, w, bias, cfg.conv_kernel, 2)?;
        h = tape.swish(h);
    }
    Ok(h)
}

/// One conformer block: half-residual FF, self-attention, the convolution
/// module (with the squeeze-and-excitation and extra pointwise stages), a
/// second half-residual FF, and a closing layer norm. Pre-norm throughout.
fn conformer_block(
    tape: &mut Tape,
    b: &mut Bindings,
    s: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    h: Var,
    mode: &mut DropoutMode,
) -> Result<Var> {
    // First feed-forward, half residual.
    let t = norm(tape, b, s, &format!("{prefix}.ff1.norm"), h)?;
    let t = ff(tape, b, s, &format!("{prefix}.ff1"), t)?;
    let t = drop_layer(tape, t, mode)?;
    let t = tape.scale(t, 0.5);
    let mut h = tape.add(h, t)?;

    // Self-attention (non-causal: the encoder sees the whole input).
    let t = norm(tape, b, s, &format!("{prefix}.attn.norm"), h)?;
    let p = attn(tape, b, s, &format!("{prefix}.attn"))?;
    let t = multi_head_attention(tape, t, t, t, &p, cfg.heads, None)?;
    let t = drop_layer(tape, t, mode)?;
    h = tape.add(h, t)?;

    // Convolution module: pointwise expand, gated activation, depthwise,
    // extra pointwise, squeeze-excitation, activation, pointwise out.
    let t = norm(tape, b, s, &format!("{prefix}.conv.norm"), h)?;
    let w = b.var(tape, s, &format!("{prefix}.conv.pw_in.w"))?;
    let bi = b.var(tape, s, &format!("{prefix}.conv.pw_in.b"))?;
    let t = pointwise_conv1d(tape, t, w, bi)?;
    let t = glu(tape, t)?;
    let dw = b.var(tape, s, &format!("{prefix}.conv.dw.w"))?;
    let db = b.var(tape, s, &format!("{prefix}.conv.dw.b"))?;
    let t = tape.depthwise_conv1d(t, dw, db)?;
    let w = b.var(tape, s, &format!("{prefix}.conv.pw_mid.w"))?;
    let bi = b.var(tape, s, &format!("{prefix}.conv.pw_mid.b"))?;
    let t = pointwise_conv1d(tape, t, w, bi)?;
    let se_w1 = b.var(tape, s, &format!("{prefix}.conv.se.w1"))?;
    let se_b1 = b.var(tape, s, &format!("{prefix}.conv.se.b1"))?;
    let se_w2 = b.var(tape, s, &format!("{prefix}.conv.se.w2"))?;
    let se_b2 = b.var(tape, s, &format!("{prefix}.conv.se.b2"))?;
    let t = squeeze_excite(tape, t, se_w1, se_b1, se_w2, se_b2)?;
    let t = tape.swish(t);
    let w = b.var(tape, s, &format!("{prefix}.conv.pw_out.w"))?;
    let bi = b.var(tape, s, &format!("{prefix}.conv.pw_out.b"))?;
    let t = pointwise_conv1d(tape, t, w, bi)?;
    let t = drop_layer(tape, t, mode)?;
    h = tape.add(h, t)?;

    // Second feed-forward, half residual.
    let t = norm(tape, b, s, &format!("{prefix}.ff2.norm"), h)?;
    let t = ff(tape, b, s, &format!("{prefix}.ff2"), t)?;
    let t = drop_layer(tape, t, mode)?;
    let t = tape.scale(t, 0.5);
    h = tape.add(h, t)?;

    norm(tape, b, s, &format!("{prefix}.out_norm"), h)
}

pub(crate) fn build_asr_encoder(
    tape: &mut Tape,
    b: &mut Bindings,
    s: &ParamStore,
    cfg: &ModelConfig,
    x: Var,
    mode: &mut DropoutMode,
) -> Result<Var> {
    let mut h = build_subsampler(tape, b, s, cfg, "asr_enc", x)?;
    let len = tape.shape(h)[0];
    let pe = sinusoidal_positions(len, cfg.model_dim);
    let pe = tape.leaf(&pe);
    h = tape.add(h, pe)?;
    for i in 0..cfg.enc_layers {
        h = conformer_block(tape, b, s, cfg, &format!("asr_enc.{i}"), h, mode)?;
    }
    Ok(h)
}

/// Speaker feature stack: the shared subsampling geometry, one same-padding
/// convolution down to the profile dimension, then a per-frame linear layer
/// back to the model dimension — deliberately no pooling, so every encoder
/// frame keeps its own speaker estimate. Purely convolutional (no positional
/// encodings): a time-constant input yields time-constant interior features.
pub(crate) fn build_speaker_encoder(
    tape: &mut Tape,
    b: &mut Bindings,
    s: &ParamStore,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let mut h = build_subsampler(tape, b, s, cfg, "spk_enc", x)?;
    let w = b.var(tape, s, "spk_enc.proj.w")?;
    let bias = b.var(tape, s, "spk_enc.proj.b")?;
    h = conv1d(tape, h, w, bias, cfg.conv_kernel, 1)?;
    h = tape.swish(h);
    let w = b.var(tape, s, "spk_enc.out.w")?;
    let bias = b.var(tape, s, "spk_enc.out.b")?;
    pointwise_conv1d(tape, h, w, bias)
}

pub(crate) struct DecoderVars {
    pub log_probs: Var,
    pub beta: Option<Var>,
    pub q: Option<Var>,
    pub dbar: Option<Var>,
    pub asr_self: Var,
}

/// Teacher-forced decoder graph over `ids` (the start symbol plus any
/// already-known tokens). When `spk` carries `(H_spk, profiles)`, the
/// speaker block runs and its weighted profile is injected into the first
/// ASR layer's feed-forward; otherwise the injection is identically zero
/// and the graph never touches profiles (the ASR-only training path).
pub(crate) fn build_decoder(
    tape: &mut Tape,
    b: &mut Bindings,
    s: &ParamStore,
    cfg: &ModelConfig,
    ids: &[usize],
    h_asr: Var,
    spk: Option<(Var, Var)>,
    mode: &mut DropoutMode,
) -> Result<DecoderVars> {
    let n = ids.len();
    let table = b.var(tape, s, "embed.table")?;
    let e = tape.embed_rows(table, ids)?;
    let e = tape.scale(e, (cfg.model_dim as f64).sqrt());
    let pe = sinusoidal_positions(n, cfg.model_dim);
    let pe = tape.leaf(&pe);
    let z = tape.add(e, pe)?;
    let mask = causal_mask(n);

    // ASR layer 0: causal self-attention, then source attention over the
    // ASR memory. Its post-self-attention state seeds the speaker decoder.
    let t = norm(tape, b, s, "asr_dec.0.self_norm", z)?;
    let p = attn(tape, b, s, "asr_dec.0.self")?;
    let a = multi_head_attention(tape, t, t, t, &p, cfg.heads, Some(&mask))?;
    let a = drop_layer(tape, a, mode)?;
    let zbar = tape.add(z, a)?;
    let t = norm(tape, b, s, "asr_dec.0.src_norm", zbar)?;
    let p = attn(tape, b, s, "asr_dec.0.src")?;
    let a = multi_head_attention(tape, t, h_asr, h_asr, &p, cfg.heads, None)?;
    let a = drop_layer(tape, a, mode)?;
    let zbb = tape.add(zbar, a)?;

    let mut beta = None;
    let mut q_out = None;
    let mut dbar_out = None;
    // First-ASR-layer feed-forward input; the weighted profile is added
    // here and nowhere else, while the residual stays on the attention sum.
    let mut ff_in = zbb;
    if let Some((h_spk, profiles)) = spk {
        // Speaker layer 0: no self-attention — the ASR layer-0 state is the
        // query, the ASR memory supplies keys and the speaker features the
        // values — followed by its feed-forward.
        let t = norm(tape, b, s, "spk_dec.0.src_norm", zbar)?;
        let p = attn(tape, b, s, "spk_dec.0.src")?;
        let a = multi_head_attention(tape, t, h_asr, h_spk, &p, cfg.heads, None)?;
        let a = drop_layer(tape, a, mode)?;
        let mut u = tape.add(zbar, a)?;
        let t = norm(tape, b, s, "spk_dec.0.ff_norm", u)?;
        let f = ff(tape, b, s, "spk_dec.0.ff", t)?;
        let f = drop_layer(tape, f, mode)?;
        u = tape.add(u, f)?;
        for l in 1..cfg.spk_layers {
            let t = norm(tape, b, s, &format!("spk_dec.{l}.self_norm"), u)?;
            let p = attn(tape, b, s, &format!("spk_dec.{l}.self"))?;
            let a = multi_head_attention(tape, t, t, t, &p, cfg.heads, Some(&mask))?;
            let a = drop_layer(tape, a, mode)?;
            u = tape.add(u, a)?;
            let t = norm(tape, b, s, &format!("spk_dec.{l}.src_norm"), u)?;
            let p = attn(tape, b, s, &format!("spk_dec.{l}.src"))?;
            let a = multi_head_attention(tape, t, h_spk, h_spk, &p, cfg.heads, None)?;
            let a = drop_layer(tape, a, mode)?;
            u = tape.add(u, a)?;
            let t = norm(tape, b, s, &format!("spk_dec.{l}.ff_norm"), u)?;
            let f = ff(tape, b, s, &format!("spk_dec.{l}.ff"), t)?;
            let f = drop_layer(tape, f, mode)?;
            u = tape.add(u, f)?;
        }
        let u = norm(tape, b, s, "spk_dec.norm", u)?;
        let wq = b.var(tape, s, "spk_query.w")?;
        let q = tape.matmul(u, wq)?;
        // Cosine attention over the profile set, then the convex profile
        // combination fed back into the ASR path.
        let qn = tape.normalize_rows(q)?;
        let dn = tape.normalize_rows(profiles)?;
        let cos = tape.matmul_nt(qn, dn)?;
        let bta = tape.softmax(cos, 1)?;
        let dbar = tape.matmul(bta, profiles)?;
        let w_inj = b.var(tape, s, "spk_inject.w")?;
        let inj = tape.matmul(dbar, w_inj)?;
        ff_in = tape.add(zbb, inj)?;
        beta = Some(bta);
        q_out = Some(q);
        dbar_out = Some(dbar);
    }
    let t = norm(tape, b, s, "asr_dec.0.ff_norm", ff_in)?;
    let f = ff(tape, b, s, "asr_dec.0.ff", t)?;
    let f = drop_layer(tape, f, mode)?;
    let mut z = tape.add(zbb, f)?;

    for l in 1..cfg.asr_layers {
        let t = norm(tape, b, s, &format!("asr_dec.{l}.self_norm"), z)?;
        let p = attn(tape, b, s, &format!("asr_dec.{l}.self"))?;
        let a = multi_head_attention(tape, t, t, t, &p, cfg.heads, Some(&mask))?;
        let a = drop_layer(tape, a, mode)?;
        z = tape.add(z, a)?;
        let t = norm(tape, b, s, &format!("asr_dec.{l}.src_norm"), z)?;
        let p = attn(tape, b, s, &format!("asr_dec.{l}.src"))?;
        let a = multi_head_attention(tape, t, h_asr, h_asr, &p, cfg.heads, None)?;
        let a = drop_layer(tape, a, mode)?;
        z = tape.add(z, a)?;
        let t = norm(tape, b, s, &format!("asr_dec.{l}.ff_norm"), z)?;
        let f = ff(tape, b, s, &format!("asr_dec.{l}.ff"), t)?;
        let f = drop_layer(tape, f, mode)?;
        z = tape.add(z, f)?;
    }
    let z = norm(tape, b, s, "asr_dec.norm", z)?;
    let wo = b.var(tape, s, "out.w")?;
    let bo = b.var(tape, s, "out.b")?;
    let logits = tape.matmul(z, wo)?;
    let logits = tape.add_row(logits, bo)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    Ok(DecoderVars { log_probs, beta, q: q_out, dbar: dbar_out, asr_self: zbar })
}

/// Helper used by parameter registration.
struct Registrar {
    store: ParamStore,
    rng: StdRng,
}

impl Registrar {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let std = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| truncated_normal(&mut self.rng, std)).collect();
        self.store.register(name, Tensor::new(vec![rows, cols], data)?)?;
        Ok(())
    }

    fn bias(&mut self, name: &str, cols: usize) -> Result<()> {
        self.store.register(name, Tensor::zeros(vec![1, cols]))?;
        Ok(())
    }

    fn norm(&mut self, prefix: &str, cols: usize) -> Result<()> {
        self.store
            .register(&format!("{prefix}.gain"), Tensor::new(vec![1, cols], vec![1.0; cols])?)?;
        self.bias(&format!("{prefix}.bias"), cols)
    }

    fn attn(&mut self, prefix: &str, dim: usize) -> Result<()> {
        for p in ["wq", "wk", "wv", "wo"] {
            self.weight(&format!("{prefix}.{p}"), dim, dim)?;
        }
        for p in ["bq", "bk", "bv", "bo"] {
            self.bias(&format!("{prefix}.{p}"), dim)?;
        }
        Ok(())
    }

    fn ff(&mut self, prefix: &str, dim: usize, ff_dim: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w1"), dim, ff_dim)?;
        self.bias(&format!("{prefix}.b1"), ff_dim)?;
        self.weight(&format!("{prefix}.w2"), ff_dim, dim)?;
        self.bias(&format!("{prefix}.b2"), dim)
    }

    fn decoder_layer(&mut self, prefix: &str, with_self: bool, dim: usize, ff_dim: usize) -> Result<()> {
        if with_self {
            self.norm(&format!("{prefix}.self_norm"), dim)?;
            self.attn(&format!("{prefix}.self"), dim)?;
        }
        self.norm(&format!("{prefix}.src_norm"), dim)?;
        self.attn(&format!("{prefix}.src"), dim)?;
        self.norm(&format!("{prefix}.ff_norm"), dim)?;
        self.ff(&format!("{prefix}.ff"), dim, ff_dim)
    }
}

fn register_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut r = Registrar { store: ParamStore::new(), rng: StdRng::seed_from_u64(seed) };
    let (fa, fh, fd, k) = (cfg.feat_dim, cfg.model_dim, cfg.profile_dim, cfg.conv_kernel);

    // Embedding table with one extra row for the internal start symbol.
    r.weight("embed.table", cfg.vocab_size + 1, fh)?;

    for scope in ["asr_enc", "spk_enc"] {
        for stage in 0..cfg.sub_stages() {
            let in_ch = if stage == 0 { fa } else { fh };
            r.weight(&format!("{scope}.sub{stage}.w"), k * in_ch, fh)?;
            r.bias(&format!("{scope}.sub{stage}.b"), fh)?;
        }
    }
    for i in 0..cfg.enc_layers {
        let p = format!("asr_enc.{i}");
        r.norm(&format!("{p}.ff1.norm"), fh)?;
        r.ff(&format!("{p}.ff1"), fh, cfg.ff_dim)?;
        r.norm(&format!("{p}.attn.norm"), fh)?;
        r.attn(&format!("{p}.attn"), fh)?;
        r.norm(&format!("{p}.conv.norm"), fh)?;
        r.weight(&format!("{p}.conv.pw_in.w"), fh, 2 * fh)?;
        r.bias(&format!("{p}.conv.pw_in.b"), 2 * fh)?;
        r.weight(&format!("{p}.conv.dw.w"), k, fh)?;
        r.bias(&format!("{p}.conv.dw.b"), fh)?;
        r.weight(&format!("{p}.conv.pw_mid.w"), fh, fh)?;
        r.bias(&format!("{p}.conv.pw_mid.b"), fh)?;
        let se = fh / cfg.se_reduction;
        r.weight(&format!("{p}.conv.se.w1"), fh, se)?;
        r.bias(&format!("{p}.conv.se.b1"), se)?;
        r.weight(&format!("{p}.conv.se.w2"), se, fh)?;
        r.bias(&format!("{p}.conv.se.b2"), fh)?;
        r.weight(&format!("{p}.conv.pw_out.w"), fh, fh)?;
        r.bias(&format!("{p}.conv.pw_out.b"), fh)?;
        r.norm(&format!("{p}.ff2.norm"), fh)?;
        r.ff(&format!("{p}.ff2"), fh, cfg.ff_dim)?;
        r.norm(&format!("{p}.out_norm"), fh)?;
    }

    r.weight("spk_enc.proj.w", k * fh, fd)?;
    r.bias("spk_enc.proj.b", fd)?;
    r.weight("spk_enc.out.w", fd, fh)?;
    r.bias("spk_enc.out.b", fh)?;

    for l in 0..cfg.asr_layers {
        r.decoder_layer(&format!("asr_dec.{l}"), true, fh, cfg.ff_dim)?;
    }
    r.norm("asr_dec.norm", fh)?;

    // Speaker decoder layer 0 has no self-attention by construction.
    r.decoder_layer("spk_dec.0", false, fh, cfg.ff_dim)?;
    for l in 1..cfg.spk_layers {
        r.decoder_layer(&format!("spk_dec.{l}"), true, fh, cfg.ff_dim)?;
    }
    r.norm("spk_dec.norm", fh)?;

    r.weight("spk_inject.w", fd, fh)?;
    r.weight("spk_query.w", fh, fd)?;
    r.weight("out.w", fh, cfg.vocab_size)?;
    r.bias("out.b", cfg.vocab_size)?;
    Ok(r.store)
}

/// The full model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct SaAsrModel {
    config: ModelConfig,
    params: ParamStore,
}

impl SaAsrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = register_params(&config, seed)?;
        Ok(SaAsrModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Adjusts the training-time dropout rate. Every other configuration
    /// field is structural (it determines the parameter set) and is fixed
    /// for the model's lifetime.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout {rate} outside [0,1)")));
        }
        self.config.dropout = rate;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab(&self) -> Vocabulary {
        self.config.vocab()
    }

    /// Internal start-of-sequence embedding row (not a vocabulary token).
    pub fn sos_id(&self) -> usize {
        self.config.vocab_size
    }

    fn validate_features(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.feat_dim {
            return Err(Error::Shape(format!(
                "features must be [frames, {}], got {:?}",
                self.config.feat_dim,
                x.shape()
            )));
        }
        if x.rows() < self.config.subsample {
            return Err(Error::InvalidArgument(format!(
                "{} frames is shorter than the subsampling factor {}",
                x.rows(),
                self.config.subsample
            )));
        }
        x.check_finite("features")
    }

    fn validate_profiles(&self, profiles: &Tensor) -> Result<()> {
        if profiles.shape().len() != 2 || profiles.cols() != self.config.profile_dim {
            return Err(Error::Shape(format!(
                "profiles must be [K, {}], got {:?}",
                self.config.profile_dim,
                profiles.shape()
            )));
        }
        if profiles.rows() == 0 {
            return Err(Error::InvalidArgument("empty profile set".into()));
        }
        profiles.check_finite("profiles")
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs both encoders on a feature mixture (evaluation mode).
    pub fn encode(&self, x: &Tensor) -> Result<EncoderStates> {
        self.validate_features(x)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.leaf(x);
        let ha = build_asr_encoder(&mut tape, &mut binds, &self.params, &self.config, xv, &mut DropoutMode::Off)?;
        let hs = build_speaker_encoder(&mut tape, &mut binds, &self.params, &self.config, xv)?;
        Ok(EncoderStates { h_asr: tape.to_tensor(ha), h_spk: tape.to_tensor(hs) })
    }

    pub fn encode_asr(&self, x: &Tensor) -> Result<Tensor> {
        self.validate_features(x)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.leaf(x);
        let ha = build_asr_encoder(&mut tape, &mut binds, &self.params, &self.config, xv, &mut DropoutMode::Off)?;
        Ok(tape.to_tensor(ha))
    }

    pub fn encode_speaker(&self, x: &Tensor) -> Result<Tensor> {
        self.validate_features(x)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.leaf(x);
        let hs = build_speaker_encoder(&mut tape, &mut binds, &self.params, &self.config, xv)?;
        Ok(tape.to_tensor(hs))
    }

    /// Expected number of encoder frames for an input of `input_len` frames.
    pub fn encoded_len(&self, input_len: usize) -> usize {
        subsampled_len(input_len, self.config.subsample)
    }

    /// Teacher-forced decoder pass over a known token prefix (evaluation
    /// mode). Output row `i` conditions on the start symbol plus
    /// `prefix[..i]` and predicts position `i + 1`. With `profiles` absent
    /// the speaker block is skipped entirely and the profile injection is
    /// identically zero.
    pub fn decoder_forward(
        &self,
        prefix: &[usize],
        enc: &EncoderStates,
        profiles: Option<&Tensor>,
    ) -> Result<DecoderOutputs> {
        self.validate_tokens(prefix)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let ha = tape.leaf(&enc.h_asr);
        let spk = match profiles {
            Some(d) => {
                self.validate_profiles(d)?;
                let hs = tape.leaf(&enc.h_spk);
                Some((hs, tape.leaf(d)))
            }
            None => None,
        };
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(self.sos_id());
        ids.extend_from_slice(prefix);
        let dec = build_decoder(
            &mut tape,
            &mut binds,
            &self.params,
            &self.config,
            &ids,
            ha,
            spk,
            &mut DropoutMode::Off,
        )?;
        Ok(DecoderOutputs {
            log_probs: tape.to_tensor(dec.log_probs),
            beta: dec.beta.map(|v| tape.to_tensor(v)),
            queries: dec.q.map(|v| tape.to_tensor(v)),
            weighted_profiles: dec.dbar.map(|v| tape.to_tensor(v)),
            asr_self_states: tape.to_tensor(dec.asr_self),
        })
    }

    /// One decode step: given the tokens emitted so far, produce the next
    /// position's distributions. An empty prefix is the first step; the
    /// internal start symbol makes the attended sequence non-empty.
    pub fn decoder_step(
        &self,
        prefix: &[usize],
        enc: &EncoderStates,
        profiles: &Tensor,
    ) -> Result<StepOutput> {
        let out = self.decoder_forward(prefix, enc, Some(profiles))?;
        let last = out.log_probs.rows() - 1;
        let token_log_probs = out.log_probs.row(last).to_vec();
        let token_probs: Vec<f64> = token_log_probs.iter().map(|v| v.exp()).collect();
        let beta = out.beta.as_ref().expect("joint path emits posteriors");
        Ok(StepOutput {
            token_probs,
            token_log_probs,
            query: out.queries.as_ref().expect("joint path emits queries").row(last).to_vec(),
            profile_posteriors: beta.row(last).to_vec(),
            weighted_profile: out
                .weighted_profiles
                .as_ref()
                .expect("joint path emits weighted profiles")
                .row(last)
                .to_vec(),
            asr_self_state: out.asr_self_states.row(last).to_vec(),
        })
    }

    /// Joint log-probability of a (token, speaker) transcript under teacher
    /// forcing: the sum over positions of the token log-probability plus the
    /// log profile posterior of the labeled speaker. Always <= 0.
    pub fn joint_log_prob(
        &self,
        transcript: &SotTranscript,
        x: &Tensor,
        profiles: &Tensor,
    ) -> Result<f64> {
        transcript.validate(&self.vocab())?;
        self.validate_profiles(profiles)?;
        let k = profiles.rows();
        if let Some(&bad) = transcript.speakers.iter().find(|&&s| s >= k) {
            return Err(Error::InvalidArgument(format!("speaker label {bad} outside profile set of {k}")));
        }
        let enc = self.encode(x)?;
        let n = transcript.len();
        let out = self.decoder_forward(&transcript.tokens[..n - 1], &enc, Some(profiles))?;
        let beta = out.beta.as_ref().expect("joint path emits posteriors");
        let mut total = 0.0;
        for i in 0..n {
            total += out.log_probs.get2(i, transcript.tokens[i]);
            total += beta.get2(i, transcript.speakers[i]).ln();
        }
        Ok(total)
    }
}
