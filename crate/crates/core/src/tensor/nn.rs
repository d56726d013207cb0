//! Network building blocks composed from tape primitives.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Projection parameters for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product multi-head attention.
///
/// `query` is `[len_q, d]`, `keys` and `values` are `[len_k, d]`; all three
/// are projected, split into `heads` slices of width `d / heads`, attended
/// independently, concatenated, and passed through the output projection.
/// `mask`, when given, is row-major `[len_q, len_k]`; `false` entries receive
/// exactly zero attention weight.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    p: &AttnParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = *tape
        .shape(query)
        .last()
        .ok_or_else(|| Error::Shape("attention query has no columns".into()))?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "model dim {d} not divisible into {heads} heads"
        )));
    }
    let len_q = tape.shape(query)[0];
    let len_k = tape.shape(keys)[0];
    if let Some(m) = mask {
        if m.len() != len_q * len_k {
            return Err(Error::Shape(format!(
                "attention mask has {} entries for {len_q}x{len_k}",
                m.len()
            )));
        }
    }
    let dh = d / heads;
    let q = tape.matmul(query, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(keys, p.wk)?;
    let k = tape.add_row(k, p.bk)?;
    let v = tape.matmul(values, p.wv)?;
    let v = tape.add_row(v, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = match mask {
            Some(m) => tape.softmax_rows_masked(scores, m)?,
            None => tape.softmax(scores, 1)?,
        };
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(cat, p.wo)?;
    tape.add_row(out, p.bo)
}

/// Row-major `[n, n]` causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Two-layer position-wise feed-forward with a swish nonlinearity.
pub fn feed_forward(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.swish(h);
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// 1x1 convolution over time, i.e. the same linear map applied to every row.
pub fn pointwise_conv1d(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Strided temporal convolution with "same" zero padding, implemented as
/// im2col followed by a dense projection. `w` is `[kernel * in_ch, out_ch]`.
pub fn conv1d(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    let in_ch = *tape
        .shape(x)
        .last()
        .ok_or_else(|| Error::Shape("conv1d input has no columns".into()))?;
    if tape.shape(w)[0] != kernel * in_ch {
        return Err(Error::Shape(format!(
            "conv1d weight rows {} != kernel {kernel} * channels {in_ch}",
            tape.shape(w)[0]
        )));
    }
    let cols = tape.unfold1d(x, kernel, stride)?;
    let h = tape.matmul(cols, w)?;
    tape.add_row(h, b)
}

/// Gated linear unit over the column axis: splits `x` into halves `a | g`
/// and returns `a * sigmoid(g)`.
pub fn glu(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    if c == 0 || c % 2 != 0 {
        return Err(Error::Shape(format!("glu needs an even column count, got {c}")));
    }
    let a = tape.slice_cols(x, 0, c / 2)?;
    let g = tape.slice_cols(x, c / 2, c / 2)?;
    let g = tape.sigmoid(g);
    tape.mul(a, g)
}

/// Squeeze-and-excitation over time: mean-pools rows to a channel summary,
/// maps it through a bottleneck (swish then sigmoid), and rescales every
/// row of `x` by the resulting per-channel gate.
pub fn squeeze_excite(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let pooled = tape.mean_rows(x)?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.swish(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row(h, b2)?;
    let gate = tape.sigmoid(h);
    tape.mul_row(x, gate)
}

/// Sinusoidal absolute positional encodings as a `[len, dim]` constant.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * rate).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * rate).cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + dim - 1] = (pos as f64 * rate).sin();
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches construction")
}

/// Output length of the strided same-padding convolution stack used by the
/// encoders: `subsample` must be a power of two realized as stride-2 stages.
pub fn subsampled_len(input_len: usize, subsample: usize) -> usize {
    let mut len = input_len;
    let mut s = subsample;
    while s > 1 {
        len = (len + 1) / 2;
        s /= 2;
    }
    len
}
