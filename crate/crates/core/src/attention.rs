//! Multi-head scaled dot-product self-attention.
//!
//! Queries, keys and values are full `model_dim × model_dim` projections
//! (no bias), split into `head_count` slices of width `head_dim` after
//! projection. Scores are scaled by `1/sqrt(D)` where `D` is either the full
//! model width or the head width, and can be causally masked.

use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::{matmul, softmax_lastdim, xavier_uniform_init, Tensor};

/// Stand-in for `-inf` in the causal mask. Finite so that score arithmetic
/// stays finite; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = f64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleDenominator {
    /// `sqrt(model_dim)`
    FullDim,
    /// `sqrt(model_dim / head_count)`
    HeadDim,
}

impl ScaleDenominator {
    pub fn name(self) -> &'static str {
        match self {
            Self::FullDim => "full_dim",
            Self::HeadDim => "head_dim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_dim" => Some(Self::FullDim),
            "head_dim" => Some(Self::HeadDim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub head_count: usize,
    pub model_dim: usize,
    pub causal: bool,
    pub scale_denominator: ScaleDenominator,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, head_count: usize) -> Self {
        Self {
            head_count,
            model_dim,
            causal: false,
            scale_denominator: ScaleDenominator::FullDim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0
            || self.model_dim == 0
            || !self.model_dim.is_multiple_of(self.head_count)
        {
            return Err(Error::Config(vec![format!(
                "model_dim ({}) must be a positive multiple of head_count ({})",
                self.model_dim, self.head_count
            )]));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }

    /// The factor applied to raw query-key dot products.
    pub fn score_scale(&self) -> f64 {
        let d = match self.scale_denominator {
            ScaleDenominator::FullDim => self.model_dim,
            ScaleDenominator::HeadDim => self.head_dim(),
        };
        1.0 / (d as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
}

impl AttentionParams {
    /// Xavier-uniform init, drawn in query, key, value, out order.
    pub fn init(model_dim: usize, rng: &mut PrngState) -> Result<Self> {
        Ok(Self {
            w_query: xavier_uniform_init(model_dim, model_dim, rng)?,
            w_key: xavier_uniform_init(model_dim, model_dim, rng)?,
            w_value: xavier_uniform_init(model_dim, model_dim, rng)?,
            w_out: xavier_uniform_init(model_dim, model_dim, rng)?,
        })
    }

    pub fn weights(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_key", &self.w_key),
            ("w_out", &self.w_out),
            ("w_query", &self.w_query),
            ("w_value", &self.w_value),
        ]
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        for (name, w) in self.weights() {
            if w.shape() != [model_dim, model_dim] {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: w.shape().to_vec(),
                    rhs: vec![model_dim, model_dim],
                });
            }
            w.ensure_finite(name)?;
        }
        Ok(())
    }
}

fn expect_rank3(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, s, d] => Ok((b, s, d)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} expects batch x seq x dim"),
        }),
    }
}

/// `batch × seq × model_dim` to `batch × head × seq × head_dim`.
pub fn split_heads(x: &Tensor, head_count: usize) -> Result<Tensor> {
    let (batch, seq, dim) = expect_rank3(x, "split_heads")?;
    if head_count == 0 || dim % head_count != 0 {
        return Err(Error::Config(vec![format!(
            "model_dim ({dim}) must be a positive multiple of head_count ({head_count})"
        )]));
    }
    let hd = dim / head_count;
    let src = x.data();
    let mut data = vec![0.0; src.len()];
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..head_count {
                let from = (b * seq + s) * dim + h * hd;
                let to = ((b * head_count + h) * seq + s) * hd;
                data[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::new(vec![batch, head_count, seq, hd], data)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let [batch, heads, seq, hd] = *x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "merge_heads expects batch x head x seq x head_dim".into(),
        });
    };
    let dim = heads * hd;
    let src = x.data();
    let mut data = vec![0.0; src.len()];
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let from = ((b * heads + h) * seq + s) * hd;
                let to = (b * seq + s) * dim + h * hd;
                data[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::new(vec![batch, seq, dim], data)
}

/// Additive `seq × seq` mask: 0 where key `s <= t`, [`MASK_VALUE`] above the
/// diagonal.
pub fn causal_mask(seq: usize) -> Result<Tensor> {
    let mut data = vec![0.0; seq * seq];
    for t in 0..seq {
        for s in t + 1..seq {
            data[t * seq + s] = MASK_VALUE;
        }
    }
    Tensor::new(vec![seq, seq], data)
}

fn check_inputs(x: &Tensor, p: &AttentionParams, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    let (_, _, dim) = expect_rank3(x, "attention")?;
    if dim != cfg.model_dim {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.model_dim],
        });
    }
    p.validate(cfg.model_dim)?;
    x.ensure_finite("attention input")
}

/// Per-head attention probabilities, `batch × head × seq × seq`, and the
/// split value tensor.
fn weights_and_values(
    x: &Tensor,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Tensor)> {
    let q = split_heads(&matmul(x, &p.w_query)?, cfg.head_count)?;
    let k = split_heads(&matmul(x, &p.w_key)?, cfg.head_count)?;
    let v = split_heads(&matmul(x, &p.w_value)?, cfg.head_count)?;
    let mut scores = matmul(&q, &k.transpose_last2()?)?.scale(cfg.score_scale());
    if cfg.causal {
        scores = scores.add_broadcast(&causal_mask(x.shape()[1])?)?;
    }
    Ok((softmax_lastdim(&scores), v))
}

pub fn attention_weights(x: &Tensor, p: &AttentionParams, cfg: &AttentionConfig) -> Result<Tensor> {
    check_inputs(x, p, cfg)?;
    Ok(weights_and_values(x, p, cfg)?.0)
}

pub fn attention_forward(x: &Tensor, p: &AttentionParams, cfg: &AttentionConfig) -> Result<Tensor> {
    check_inputs(x, p, cfg)?;
    let (weights, v) = weights_and_values(x, p, cfg)?;
    let z = merge_heads(&matmul(&weights, &v)?)?;
    let out = matmul(&z, &p.w_out)?;
    out.ensure_finite("attention output")?;
    Ok(out)
}
