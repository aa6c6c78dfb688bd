//! Dense row-major tensors and the numeric kernels the model is built from.
//!
//! All arithmetic is `f64`. Tensors have rank 1 to 4 and every extent is at
//! least one. Kernels are pure functions: they never mutate their inputs and
//! identical inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::rng::PrngState;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be at least 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of extent {dim}"
            );
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Adds `other` to every trailing slice of `self`; `other.shape()` must be
    /// a suffix of `self.shape()` (bias rows, masks, positional rows).
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        let n = other.rank();
        if n > self.rank() || self.shape[self.rank() - n..] != other.shape[..] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let inner = other.numel();
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(inner) {
            for (o, &b) in chunk.iter_mut().zip(&other.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sums away leading axes so the result has shape `suffix`. Adjoint of
    /// [`Tensor::add_broadcast`].
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Self> {
        let n = suffix.len();
        if n > self.rank() || self.shape[self.rank() - n..] != *suffix {
            return Err(Error::ShapeMismatch {
                op: "sum_to_suffix",
                lhs: self.shape.clone(),
                rhs: suffix.to_vec(),
            });
        }
        let mut out = Self::zeros(suffix)?;
        let inner = out.numel();
        for chunk in self.data.chunks_exact(inner) {
            for (o, &v) in out.data.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut data = vec![0.0; self.numel()];
        for (src, dst) in self
            .data
            .chunks_exact(rows * cols)
            .zip(data.chunks_exact_mut(rows * cols))
        {
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        Ok(Self { shape, data })
    }
}

/// Integer tensor of token ids or positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTensor {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl IndexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK - 1 || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "index tensors need rank 1..=3 with positive extents".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} ids, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `rows × cols` batch from equal-length rows.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: format!("row {bad} has {} entries", rows[bad].len()),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Positions `0..seq` repeated for each of `batch` rows.
    pub fn positions(batch: usize, seq: usize) -> Result<Self> {
        Self::new(vec![batch, seq], (0..batch).flat_map(|_| 0..seq).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Matrix product over the last two axes, batched over any leading axes.
///
/// Leading (batch) axes must match, or one side's batch must be all ones, in
/// which case it is broadcast. A plain matrix on the right therefore
/// multiplies every batch slice of the left operand.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch_a = &a.shape[..a.rank() - 2];
    let batch_b = &b.shape[..b.rank() - 2];
    let (batch, a_step, b_step) = if batch_a == batch_b {
        (batch_a.to_vec(), m * k, k * n)
    } else if numel_of(batch_b) == 1 {
        (batch_a.to_vec(), m * k, 0)
    } else if numel_of(batch_a) == 1 {
        (batch_b.to_vec(), 0, k * n)
    } else {
        return Err(mismatch());
    };
    let count = numel_of(&batch);
    let mut shape = batch;
    shape.extend([m, n]);
    check_shape(&shape)?;

    let mut data = vec![0.0; count * m * n];
    for (bi, out) in data.chunks_exact_mut(m * n).enumerate() {
        let lhs = &a.data[bi * a_step..bi * a_step + m * k];
        let rhs = &b.data[bi * b_step..bi * b_step + k * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = lhs[i * k + p];
                for (o, &bpj) in row.iter_mut().zip(&rhs[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation `1/sqrt(var + eps)`, using
/// the biased variance.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let (mean, inv_std) = row_stats(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = g * ((*v - mean) * inv_std) + b;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "gelu" => Some(Self::Gelu),
            _ => None,
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Gelu => v * std_normal_cdf(v),
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Self::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gelu => std_normal_cdf(v) + v * std_normal_pdf(v),
        }
    }
}

pub(crate) fn std_normal_cdf(v: f64) -> f64 {
    0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `fan_in × fan_out` matrix of i.i.d. draws on `[-b, b]`,
/// `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform_init(fan_in: usize, fan_out: usize, rng: &mut PrngState) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidShape {
            shape: vec![fan_in, fan_out],
            reason: "fan_in and fan_out must be at least 1".into(),
        });
    }
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Row lookup: output shape is `ids.shape() ++ [dim]`.
pub fn embedding_gather(table: &Tensor, ids: &IndexTensor) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: table.shape.clone(),
            reason: "embedding table must be vocab x dim".into(),
        });
    }
    let (vocab, dim) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(ids.numel() * dim);
    for (position, &id) in ids.data().iter().enumerate() {
        if id >= vocab {
            return Err(Error::Index {
                id,
                position,
                bound: vocab,
            });
        }
        data.extend_from_slice(&table.data[id * dim..(id + 1) * dim]);
    }
    let mut shape = ids.shape().to_vec();
    shape.push(dim);
    Tensor::new(shape, data)
}
