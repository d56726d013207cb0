//! Reverse-mode autodiff on a linear tape.
//!
//! Operations execute eagerly: each builder method computes the forward
//! value, records the operation, and returns a [`Var`] handle. [`Tape::backward`]
//! replays the records in reverse, accumulating vector-Jacobian products.
//! All values are `f64`; tensors are row-major, and rank-1 values are treated
//! as a single row wherever a matrix view is needed.

use rand::rngs::StdRng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows with an L2 norm below this are normalized to zero instead of blowing
/// up; downstream cosine similarities treat such rows as orthogonal.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a broadcast row vector.
    AddRow(Var, Var),
    /// Matrix times a broadcast row vector, elementwise per row.
    MulRow(Var, Var),
    Scale(Var, f64),
    /// `a @ b` with `a: [m,k]`, `b: [k,n]`.
    Matmul(Var, Var),
    /// `a @ b^T` with `a: [m,k]`, `b: [n,k]`.
    MatmulNT(Var, Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Swish(Var),
    /// Softmax along `axis` (0 = down columns, 1 = across rows). Masked
    /// entries produce exactly zero output, which backward relies on.
    Softmax { x: Var, axis: usize },
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    /// Column-wise mean over rows: `[t,c] -> [1,c]`.
    MeanRows(Var),
    SumAll(Var),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    /// Row lookup into a table: out row `i` is `table[ids[i]]`.
    EmbedRows { table: Var, ids: Vec<usize> },
    /// Per-row single-column gather: out `[n,1]` with out[i] = x[i, cols[i]].
    GatherRowCols { x: Var, cols: Vec<usize> },
    /// im2col for 1-D convolution over time with zero padding.
    Unfold1d { x: Var, kernel: usize, stride: usize, pad_left: usize },
    /// Depthwise temporal convolution, stride 1, same padding, odd kernel.
    DepthwiseConv1d { x: Var, weight: Var, bias: Var },
    /// Rows scaled to unit L2 norm (near-zero rows map to zero).
    NormalizeRows(Var),
    /// Elementwise multiply by a stored mask of `{0, 1/(1-rate)}` values.
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Views a shape as a `(rows, cols)` matrix; rank 1 is a single row.
fn mat_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        r => Err(Error::Shape(format!("expected rank 1 or 2, got rank {r}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `a[m,k] @ b[k,n]`.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `a[m,k] @ b[n,k]^T`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `a[k,m]^T @ b[k,n]`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places a tensor on the tape; gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Places raw data on the tape as a leaf.
    pub fn input(&mut self, shape: &[usize], data: &[f64], needs_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(data.to_vec(), shape.to_vec(), Op::Leaf, needs_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated for `v` by [`Tape::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is internally consistent")
    }

    /// Drops all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{name}: shape {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), ng))
    }

    /// `[t,c] + [1,c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, c) = mat_dims(&self.nodes[a.0].shape)?;
        let (rr, rc) = mat_dims(&self.nodes[row.0].shape)?;
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!("add_row: [{t},{c}] + [{rr},{rc}]")));
        }
        let mut data = self.nodes[a.0].data.clone();
        for ti in 0..t {
            for ci in 0..c {
                data[ti * c + ci] += self.nodes[row.0].data[ci];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(data, shape, Op::AddRow(a, row), ng))
    }

    /// `[t,c] * [1,c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, c) = mat_dims(&self.nodes[a.0].shape)?;
        let (rr, rc) = mat_dims(&self.nodes[row.0].shape)?;
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!("mul_row: [{t},{c}] * [{rr},{rc}]")));
        }
        let mut data = self.nodes[a.0].data.clone();
        for ti in 0..t {
            for ci in 0..c {
                data[ti * c + ci] *= self.nodes[row.0].data[ci];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(data, shape, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(&self.nodes[a.0].shape)?;
        let (k2, n) = mat_dims(&self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{m},{k}] @ [{k2},{n}]")));
        }
        let data = mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::Matmul(a, b), ng))
    }

    /// `a @ b^T`; `b` is stored row-major as `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(&self.nodes[a.0].shape)?;
        let (n, k2) = mat_dims(&self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt: [{m},{k}] @ [{n},{k2}]^T")));
        }
        let data = mm_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::MatmulNT(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Op::Swish(a), |x| x * sigmoid(x))
    }

    /// Numerically stabilized softmax along `axis` of a rank-1 or rank-2
    /// value. Rank-1 values only admit `axis == 0`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.nodes[x.0].shape.len();
        let axis = match (rank, axis) {
            (1, 0) => 1, // a vector is one row; normalize across it
            (2, 0) | (2, 1) => axis,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "softmax axis {axis} invalid for rank-{rank} tensor"
                )))
            }
        };
        self.softmax_inner(x, axis, None)
    }

    /// Row softmax where `mask[i] == false` forces exactly zero weight.
    /// `mask` is row-major with the same element count as `x`.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "softmax mask has {} entries for {} elements",
                mask.len(),
                self.nodes[x.0].data.len()
            )));
        }
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        for r in 0..rows {
            if !mask[r * cols..(r + 1) * cols].iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!("softmax mask row {r} is fully masked")));
            }
        }
        self.softmax_inner(x, 1, Some(mask.to_vec()))
    }

    fn softmax_inner(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        let xs = &self.nodes[x.0].data;
        let mut data = vec![0.0; xs.len()];
        // Iterate lanes: along rows for axis 1, along columns for axis 0.
        let (lanes, lane_len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        let idx = |lane: usize, i: usize| if axis == 1 { lane * cols + i } else { i * cols + lane };
        for lane in 0..lanes {
            let kept = |i: usize| mask.as_ref().map_or(true, |m| m[idx(lane, i)]);
            let mut mx = f64::NEG_INFINITY;
            for i in 0..lane_len {
                if kept(i) {
                    mx = mx.max(xs[idx(lane, i)]);
                }
            }
            let mut denom = 0.0;
            for i in 0..lane_len {
                if kept(i) {
                    let e = (xs[idx(lane, i)] - mx).exp();
                    data[idx(lane, i)] = e;
                    denom += e;
                }
            }
            for i in 0..lane_len {
                data[idx(lane, i)] /= denom;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Softmax { x, axis }, ng))
    }

    /// Row-wise log-softmax (stabilized log of the row softmax).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        let xs = &self.nodes[x.0].data;
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::LogSoftmaxRows(x), ng))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = mat_dims(&self.nodes[v.0].shape)?;
            if r != 1 || c != cols {
                return Err(Error::Shape(format!("layer_norm {name}: [{r},{c}] for {cols} columns")));
            }
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xh = (row[c] - mean) * inv_std;
                data[r * cols + c] = xh * self.nodes[gain.0].data[c] + self.nodes[bias.0].data[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(data, shape, Op::LayerNorm { x, gain, bias }, ng))
    }

    /// Column-wise mean over rows: `[t,c] -> [1,c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += self.nodes[x.0].data[r * cols + c];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![1, cols], Op::MeanRows(x), ng))
    }

    /// Sum of every element, producing a scalar of shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::SumAll(x), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        if start + len > rows {
            return Err(Error::Shape(format!("slice_rows {start}..{} of {rows}", start + len)));
        }
        let data = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, vec![len, cols], Op::SliceRows { x, start, len }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        if start + len > cols {
            return Err(Error::Shape(format!("slice_cols {start}..{} of {cols}", start + len)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![rows, len], Op::SliceCols { x, start, len }, ng))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of zero parts".into()));
        }
        let (rows, _) = mat_dims(&self.nodes[parts[0].0].shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = mat_dims(&self.nodes[p.0].shape)?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![rows, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Looks up rows of `table` by index.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[table.0].shape)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embed_rows with no ids".into()));
        }
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidArgument(format!("embed id {id} out of {rows} rows")));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table.0].data[id * cols..(id + 1) * cols]);
        }
        let ng = self.needs(table);
        Ok(self.push(data, vec![ids.len(), cols], Op::EmbedRows { table, ids: ids.to_vec() }, ng))
    }

    /// Picks one column per row: out `[n,1]` with `out[i] = x[i, cols[i]]`.
    pub fn gather_row_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = mat_dims(&self.nodes[x.0].shape)?;
        if cols.len() != rows {
            return Err(Error::Shape(format!("gather: {} indices for {rows} rows", cols.len())));
        }
        for &c in cols {
            if c >= width {
                return Err(Error::InvalidArgument(format!("gather col {c} out of {width}")));
            }
        }
        let data: Vec<f64> =
            cols.iter().enumerate().map(|(r, &c)| self.nodes[x.0].data[r * width + c]).collect();
        let ng = self.needs(x);
        Ok(self.push(data, vec![rows, 1], Op::GatherRowCols { x, cols: cols.to_vec() }, ng))
    }

    /// im2col over the time (row) axis with "same" zero padding: output row
    /// `o` is the concatenation of `kernel` input rows starting at
    /// `o*stride - pad_left`. Output has `ceil(t / stride)` rows.
    pub fn unfold1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument("unfold1d: kernel and stride must be positive".into()));
        }
        let (t, c) = mat_dims(&self.nodes[x.0].shape)?;
        let out_len = (t + stride - 1) / stride;
        let pad_total = ((out_len - 1) * stride + kernel).saturating_sub(t);
        let pad_left = pad_total / 2;
        let mut data = vec![0.0; out_len * kernel * c];
        for o in 0..out_len {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad_left as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                data[(o * kernel + j) * c..(o * kernel + j + 1) * c]
                    .copy_from_slice(&self.nodes[x.0].data[src * c..(src + 1) * c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![out_len, kernel * c], Op::Unfold1d { x, kernel, stride, pad_left }, ng))
    }

    /// Depthwise temporal convolution: `weight` is `[kernel, channels]`,
    /// `bias` is `[1, channels]`; stride 1, same padding, odd kernel.
    pub fn depthwise_conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (t, c) = mat_dims(&self.nodes[x.0].shape)?;
        let (k, wc) = mat_dims(&self.nodes[weight.0].shape)?;
        let (br, bc) = mat_dims(&self.nodes[bias.0].shape)?;
        if wc != c || br != 1 || bc != c {
            return Err(Error::Shape(format!(
                "depthwise_conv1d: x[{t},{c}], weight[{k},{wc}], bias[{br},{bc}]"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("depthwise kernel {k} must be odd")));
        }
        let pad = (k - 1) / 2;
        let mut data = vec![0.0; t * c];
        for ti in 0..t {
            for ci in 0..c {
                let mut s = self.nodes[bias.0].data[ci];
                for j in 0..k {
                    let src = (ti + j) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    s += self.nodes[weight.0].data[j * c + ci]
                        * self.nodes[x.0].data[src as usize * c + ci];
                }
                data[ti * c + ci] = s;
            }
        }
        let ng = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(data, vec![t, c], Op::DepthwiseConv1d { x, weight, bias }, ng))
    }

    /// Scales each row to unit L2 norm; rows below [`NORMALIZE_EPS`] map to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= NORMALIZE_EPS {
                for c in 0..cols {
                    data[r * cols + c] = row[c] / norm;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::NormalizeRows(x), ng))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales kept elements by `1/(1-rate)`. `rate == 0` is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut StdRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Dropout { x, mask }, ng))
    }

    fn add_grad(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Accumulates `d loss / d node` for every gradient-requiring node.
    /// Repeated calls without [`Tape::zero_grads`] add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.add_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gi, ai)| gi * ai).collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::AddRow(a, row) => {
                    self.add_grad(a, &g);
                    let (t, c) = mat_dims(&self.nodes[a.0].shape)?;
                    let mut dr = vec![0.0; c];
                    for ti in 0..t {
                        for ci in 0..c {
                            dr[ci] += g[ti * c + ci];
                        }
                    }
                    self.add_grad(row, &dr);
                }
                Op::MulRow(a, row) => {
                    let (t, c) = mat_dims(&self.nodes[a.0].shape)?;
                    let mut da = vec![0.0; t * c];
                    let mut dr = vec![0.0; c];
                    for ti in 0..t {
                        for ci in 0..c {
                            da[ti * c + ci] = g[ti * c + ci] * self.nodes[row.0].data[ci];
                            dr[ci] += g[ti * c + ci] * self.nodes[a.0].data[ti * c + ci];
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(row, &dr);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.add_grad(a, &da);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = mat_dims(&self.nodes[a.0].shape)?;
                    let (_, n) = mat_dims(&self.nodes[b.0].shape)?;
                    let da = mm_nt(&g, &self.nodes[b.0].data, m, n, k);
                    let db = mm_tn(&self.nodes[a.0].data, &g, m, k, n);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = mat_dims(&self.nodes[a.0].shape)?;
                    let (n, _) = mat_dims(&self.nodes[b.0].shape)?;
                    let da = mm_nn(&g, &self.nodes[b.0].data, m, n, k);
                    let db = mm_tn(&g, &self.nodes[a.0].data, m, n, k);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[i].data).map(|(gi, yi)| gi * yi).collect();
                    self.add_grad(a, &da);
                }
                Op::Ln(a) => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gi, xi)| gi / xi).collect();
                    self.add_grad(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Swish(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * s * (1.0 + xi * (1.0 - s))
                        })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Softmax { x, axis } => {
                    // `axis` is canonical here: the builder maps rank-1
                    // inputs to a single row with axis 1.
                    let (rows, cols) = mat_dims(&self.nodes[i].shape)?;
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; y.len()];
                    let (lanes, lane_len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
                    let idx = |lane: usize, j: usize| {
                        if axis == 1 {
                            lane * cols + j
                        } else {
                            j * cols + lane
                        }
                    };
                    for lane in 0..lanes {
                        let mut dot = 0.0;
                        for j in 0..lane_len {
                            dot += g[idx(lane, j)] * y[idx(lane, j)];
                        }
                        for j in 0..lane_len {
                            let p = idx(lane, j);
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let (rows, cols) = mat_dims(&self.nodes[i].shape)?;
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let p = r * cols + c;
                            dx[p] = g[p] - y[p].exp() * gsum;
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xh: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gs: Vec<f64> = gr
                            .iter()
                            .enumerate()
                            .map(|(c, gi)| gi * self.nodes[gain.0].data[c])
                            .collect();
                        let m1 = gs.iter().sum::<f64>() / cols as f64;
                        let m2 = gs.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std * (gs[c] - m1 - xh[c] * m2);
                            dgain[c] += gr[c] * xh[c];
                            dbias[c] += gr[c];
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gain, &dgain);
                    self.add_grad(bias, &dbias);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] / rows as f64;
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::SumAll(x) => {
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    self.add_grad(x, &dx);
                }
                Op::SliceRows { x, start, len } => {
                    let (_, cols) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[start * cols..(start + len) * cols].copy_from_slice(&g);
                    self.add_grad(x, &dx);
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = mat_dims(&self.nodes[i].shape)?;
                    let mut offset = 0;
                    for &p in &parts {
                        let (_, w) = mat_dims(&self.nodes[p.0].shape)?;
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.add_grad(p, &dp);
                        offset += w;
                    }
                }
                Op::EmbedRows { table, ids } => {
                    let (_, cols) = mat_dims(&self.nodes[table.0].shape)?;
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[id * cols + c] += g[r * cols + c];
                        }
                    }
                    self.add_grad(table, &dt);
                }
                Op::GatherRowCols { x, cols } => {
                    let (_, width) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (r, &c) in cols.iter().enumerate() {
                        dx[r * width + c] += g[r];
                    }
                    self.add_grad(x, &dx);
                }
                Op::Unfold1d { x, kernel, stride, pad_left } => {
                    let (t, c) = mat_dims(&self.nodes[x.0].shape)?;
                    let out_len = self.nodes[i].shape[0];
                    let mut dx = vec![0.0; t * c];
                    for o in 0..out_len {
                        for j in 0..kernel {
                            let src = (o * stride + j) as isize - pad_left as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..c {
                                dx[src * c + ci] += g[(o * kernel + j) * c + ci];
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::DepthwiseConv1d { x, weight, bias } => {
                    let (t, c) = mat_dims(&self.nodes[x.0].shape)?;
                    let (k, _) = mat_dims(&self.nodes[weight.0].shape)?;
                    let pad = (k - 1) / 2;
                    let mut dx = vec![0.0; t * c];
                    let mut dw = vec![0.0; k * c];
                    let mut db = vec![0.0; c];
                    for ti in 0..t {
                        for ci in 0..c {
                            let go = g[ti * c + ci];
                            db[ci] += go;
                            for j in 0..k {
                                let src = (ti + j) as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let src = src as usize;
                                dx[src * c + ci] += go * self.nodes[weight.0].data[j * c + ci];
                                dw[j * c + ci] += go * self.nodes[x.0].data[src * c + ci];
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(weight, &dw);
                    self.add_grad(bias, &db);
                }
                Op::NormalizeRows(x) => {
                    let (rows, cols) = mat_dims(&self.nodes[x.0].shape)?;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORMALIZE_EPS {
                            continue;
                        }
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ci in 0..cols {
                            dx[r * cols + ci] = gr[ci] / norm - row[ci] * dot / norm.powi(3);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Dropout { x, mask } => {
                    let dx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                    self.add_grad(x, &dx);
                }
            }
        }
        Ok(())
    }
}
