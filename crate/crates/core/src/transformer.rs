//! Pre-norm residual blocks and the full token-to-logits model.
//!
//! ```text
//! tokens -> embed + PE -> dropout -> [block] x L -> linear -> logits
//! block:  x += drop(attn(LN1 x));  x += drop(W2 act(W1 LN2 x + b1) + b2)
//! ```

use std::collections::BTreeMap;

use crate::attention::{attention_forward, AttentionParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::positional::PositionalTable;
use crate::rng::PrngState;
use crate::tensor::{
    activation, embedding_gather, layer_norm, matmul, xavier_uniform_init, IndexTensor, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_w: Tensor,
    pub final_b: Tensor,
}

impl BlockParams {
    pub fn init(cfg: &ModelConfig, rng: &mut PrngState) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            attention: AttentionParams::init(d, rng)?,
            ff_w1: xavier_uniform_init(d, cfg.hidden_dim, rng)?,
            ff_b1: Tensor::zeros(&[cfg.hidden_dim])?,
            ff_w2: xavier_uniform_init(cfg.hidden_dim, d, rng)?,
            ff_b2: Tensor::zeros(&[d])?,
            norm1_gamma: Tensor::ones(&[d])?,
            norm1_beta: Tensor::zeros(&[d])?,
            norm2_gamma: Tensor::ones(&[d])?,
            norm2_beta: Tensor::zeros(&[d])?,
        })
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        let a = &self.attention;
        [
            ("attention.w_key", &a.w_key),
            ("attention.w_out", &a.w_out),
            ("attention.w_query", &a.w_query),
            ("attention.w_value", &a.w_value),
            ("ff_b1", &self.ff_b1),
            ("ff_b2", &self.ff_b2),
            ("ff_w1", &self.ff_w1),
            ("ff_w2", &self.ff_w2),
            ("norm1_beta", &self.norm1_beta),
            ("norm1_gamma", &self.norm1_gamma),
            ("norm2_beta", &self.norm2_beta),
            ("norm2_gamma", &self.norm2_gamma),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        let a = &mut self.attention;
        [
            ("attention.w_key", &mut a.w_key),
            ("attention.w_out", &mut a.w_out),
            ("attention.w_query", &mut a.w_query),
            ("attention.w_value", &mut a.w_value),
            ("ff_b1", &mut self.ff_b1),
            ("ff_b2", &mut self.ff_b2),
            ("ff_w1", &mut self.ff_w1),
            ("ff_w2", &mut self.ff_w2),
            ("norm1_beta", &mut self.norm1_beta),
            ("norm1_gamma", &mut self.norm1_gamma),
            ("norm2_beta", &mut self.norm2_beta),
            ("norm2_gamma", &mut self.norm2_gamma),
        ]
    }
}

/// Expected shape of every named parameter for `cfg`, keyed by name.
pub fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (v, d, h) = (cfg.vocab_size, cfg.model_dim, cfg.hidden_dim);
    let mut shapes = BTreeMap::new();
    shapes.insert("embedding".to_string(), vec![v, d]);
    shapes.insert("final_b".to_string(), vec![v]);
    shapes.insert("final_w".to_string(), vec![d, v]);
    for l in 0..cfg.layer_count {
        let block: [(&str, Vec<usize>); 12] = [
            ("attention.w_key", vec![d, d]),
            ("attention.w_out", vec![d, d]),
            ("attention.w_query", vec![d, d]),
            ("attention.w_value", vec![d, d]),
            ("ff_b1", vec![h]),
            ("ff_b2", vec![d]),
            ("ff_w1", vec![d, h]),
            ("ff_w2", vec![h, d]),
            ("norm1_beta", vec![d]),
            ("norm1_gamma", vec![d]),
            ("norm2_beta", vec![d]),
            ("norm2_gamma", vec![d]),
        ];
        for (name, shape) in block {
            shapes.insert(format!("blocks.{l}.{name}"), shape);
        }
    }
    shapes
}

impl ModelParams {
    /// Xavier-uniform matrices, zero biases and betas, unit gammas. Draw
    /// order: embedding, then per block q, k, v, out, ff_w1, ff_w2, then the
    /// final projection.
    pub fn init(cfg: &ModelConfig, rng: &mut PrngState) -> Result<Self> {
        cfg.validate()?;
        let embedding = xavier_uniform_init(cfg.vocab_size, cfg.model_dim, rng)?;
        let blocks = (0..cfg.layer_count)
            .map(|_| BlockParams::init(cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding,
            blocks,
            final_w: xavier_uniform_init(cfg.model_dim, cfg.vocab_size, rng)?,
            final_b: Tensor::zeros(&[cfg.vocab_size])?,
        })
    }

    /// All parameters with their dotted names, sorted by name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("final_b".to_string(), &self.final_b),
            ("final_w".to_string(), &self.final_w),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("final_b".to_string(), &mut self.final_b),
            ("final_w".to_string(), &mut self.final_w),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from a name-to-tensor map. Every expected name must
    /// be present with the expected shape, and no extras are allowed.
    pub fn from_named(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = parameter_shapes(cfg);
        for (name, shape) in &shapes {
            match tensors.get(name) {
                None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::ShapeMismatch {
                        op: "parameter",
                        lhs: t.shape().to_vec(),
                        rhs: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::Contract(format!("unexpected parameter `{extra}`")));
        }
        let mut take = |name: String| tensors.remove(&name).expect("checked above");
        let blocks = (0..cfg.layer_count)
            .map(|l| BlockParams {
                attention: AttentionParams {
                    w_query: take(format!("blocks.{l}.attention.w_query")),
                    w_key: take(format!("blocks.{l}.attention.w_key")),
                    w_value: take(format!("blocks.{l}.attention.w_value")),
                    w_out: take(format!("blocks.{l}.attention.w_out")),
                },
                ff_w1: take(format!("blocks.{l}.ff_w1")),
                ff_b1: take(format!("blocks.{l}.ff_b1")),
                ff_w2: take(format!("blocks.{l}.ff_w2")),
                ff_b2: take(format!("blocks.{l}.ff_b2")),
                norm1_gamma: take(format!("blocks.{l}.norm1_gamma")),
                norm1_beta: take(format!("blocks.{l}.norm1_beta")),
                norm2_gamma: take(format!("blocks.{l}.norm2_gamma")),
                norm2_beta: take(format!("blocks.{l}.norm2_beta")),
            })
            .collect();
        let params = Self {
            embedding: take("embedding".into()),
            blocks,
            final_w: take("final_w".into()),
            final_b: take("final_b".into()),
        };
        params.validate(cfg)?;
        Ok(params)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.blocks.len() != cfg.layer_count {
            return Err(Error::Contract(format!(
                "{} blocks for layer_count {}",
                self.blocks.len(),
                cfg.layer_count
            )));
        }
        let shapes = parameter_shapes(cfg);
        for (name, t) in self.named() {
            let expected = &shapes[&name];
            if t.shape() != &expected[..] {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: expected.clone(),
                });
            }
            t.ensure_finite(&name)?;
        }
        Ok(())
    }
}

/// Per-element keep multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. Draws exactly one uniform per element.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut PrngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

/// Whether dropout does anything (and consumes randomness) in this mode.
pub fn dropout_active(rate: f64, mode: Mode) -> bool {
    mode == Mode::Train && rate > 0.0
}

pub fn dropout_apply(x: &Tensor, rate: f64, mode: Mode, rng: &mut PrngState) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(vec![format!(
            "dropout rate must be in [0, 1), got {rate}"
        )]));
    }
    if !dropout_active(rate, mode) {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, rng);
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}

/// Position-wise feed-forward: `act(x W1 + b1) W2 + b2`.
pub fn feed_forward(x: &Tensor, b: &BlockParams, cfg: &ModelConfig) -> Result<Tensor> {
    let hidden = matmul(x, &b.ff_w1)?.add_broadcast(&b.ff_b1)?;
    matmul(&activation(&hidden, cfg.activation), &b.ff_w2)?.add_broadcast(&b.ff_b2)
}

pub fn block_forward(
    x: &Tensor,
    b: &BlockParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut PrngState,
) -> Result<Tensor> {
    let eps = cfg.layer_norm_eps;
    let normed = layer_norm(x, &b.norm1_gamma, &b.norm1_beta, eps)?;
    let attn = attention_forward(&normed, &b.attention, &cfg.attention())?;
    let x = x.add(&dropout_apply(&attn, cfg.dropout_rate, mode, rng)?)?;

    let normed = layer_norm(&x, &b.norm2_gamma, &b.norm2_beta, eps)?;
    let ff = feed_forward(&normed, b, cfg)?;
    let x = x.add(&dropout_apply(&ff, cfg.dropout_rate, mode, rng)?)?;
    x.ensure_finite("block output")?;
    Ok(x)
}

/// Checks a `batch × seq` token tensor against the config and returns
/// `(batch, seq)`.
pub fn check_tokens(tokens: &IndexTensor, cfg: &ModelConfig) -> Result<(usize, usize)> {
    let [batch, seq] = *tokens.shape() else {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "tokens must be batch x seq".into(),
        });
    };
    if seq > cfg.max_len {
        return Err(Error::PositionRange {
            position: seq - 1,
            max_len: cfg.max_len,
        });
    }
    if let Some((position, &id)) = tokens
        .data()
        .iter()
        .enumerate()
        .find(|(_, &id)| id >= cfg.vocab_size)
    {
        return Err(Error::Index {
            id,
            position,
            bound: cfg.vocab_size,
        });
    }
    Ok((batch, seq))
}

/// Positional rows for positions `0..seq` in every batch row. Only the
/// first `seq` rows are materialised; they are identical to the
/// corresponding rows of a full `max_len` table.
pub fn position_rows(batch: usize, seq: usize, cfg: &ModelConfig) -> Result<Tensor> {
    let table = PositionalTable::build(cfg.model_dim, seq)?;
    table.lookup(&IndexTensor::positions(batch, seq)?)
}

pub fn model_forward(
    tokens: &IndexTensor,
    p: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut PrngState,
) -> Result<Tensor> {
    cfg.validate()?;
    let (batch, seq) = check_tokens(tokens, cfg)?;
    if p.blocks.len() != cfg.layer_count {
        return Err(Error::Contract(format!(
            "{} blocks for layer_count {}",
            p.blocks.len(),
            cfg.layer_count
        )));
    }
    let pe = if cfg.positional_encoding {
        Some(position_rows(batch, seq, cfg)?)
    } else {
        None
    };

    let mut x = embedding_gather(&p.embedding, tokens)?;
    if let Some(pe) = &pe {
        x = x.add(pe)?;
    }
    x = dropout_apply(&x, cfg.dropout_rate, mode, rng)?;
    for block in &p.blocks {
        if cfg.per_layer_pe {
            if let Some(pe) = &pe {
                x = x.add(pe)?;
            }
        }
        x = block_forward(&x, block, cfg, mode, rng)?;
    }
    let logits = matmul(&x, &p.final_w)?.add_broadcast(&p.final_b)?;
    logits.ensure_finite("logits")?;
    Ok(logits)
}
