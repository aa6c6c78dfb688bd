//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation in execution order, so operands always
//! precede their consumers. [`Tape::backward`] walks the record in reverse and
//! returns a [`GradMap`] holding a gradient for every named leaf, zero for
//! leaves the loss does not depend on. Backward never mutates the tape and
//! can be called repeatedly.

use std::collections::BTreeMap;

use crate::attention::{causal_mask, merge_heads, split_heads};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::{
    embedding_gather, layer_norm, matmul, row_stats, softmax_lastdim, Activation, IndexTensor,
    Tensor,
};
use crate::transformer::{
    check_tokens, dropout_active, dropout_mask, position_rows, Mode, ModelParams,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        name: Option<String>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Activation(Var, Activation),
    Gather {
        table: Var,
        ids: IndexTensor,
    },
    SplitHeads(Var),
    MergeHeads(Var),
    TransposeLast2(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        counted: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }
}

/// Sums leading chunks of `t` down to `shape` (adjoint of batch broadcast).
fn reduce_to(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t);
    }
    let inner: usize = shape.iter().product();
    let mut acc = vec![0.0; inner];
    for chunk in t.data().chunks_exact(inner) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::new(shape.to_vec(), acc)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    /// An anonymous leaf; no gradient is reported for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_broadcast(self.value(b))?;
        Ok(self.push(v, Op::AddBroadcast(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_lastdim(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let v = crate::tensor::activation(self.value(a), kind);
        self.push(v, Op::Activation(a, kind))
    }

    pub fn gather(&mut self, table: Var, ids: &IndexTensor) -> Result<Var> {
        let v = embedding_gather(self.value(table), ids)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.clone(),
            },
        ))
    }

    pub fn split_heads(&mut self, a: Var, head_count: usize) -> Result<Var> {
        let v = split_heads(self.value(a), head_count)?;
        Ok(self.push(v, Op::SplitHeads(a)))
    }

    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let v = merge_heads(self.value(a))?;
        Ok(self.push(v, Op::MergeHeads(a)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose_last2()?;
        Ok(self.push(v, Op::TransposeLast2(a)))
    }

    /// Inverted dropout. The sampled mask is stored on the tape so the
    /// backward pass differentiates exactly the sampled network.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut PrngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(vec![format!(
                "dropout rate must be in [0, 1), got {rate}"
            )]));
        }
        if !dropout_active(rate, mode) {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).numel(), rate, rng);
        let mut v = self.value(a).clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(v, Op::Dropout { x: a, mask }))
    }

    /// Mean token cross-entropy; see [`cross_entropy_masked`].
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &IndexTensor,
        counted: Option<&[bool]>,
    ) -> Result<Var> {
        let counted = counted.map_or_else(|| vec![true; targets.numel()], <[bool]>::to_vec);
        let loss = cross_entropy_masked(self.value(logits), targets, &counted)?;
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                counted,
            },
        ))
    }

    /// Gradient of the scalar `loss` with respect to every named leaf.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape())?);

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&g)?,
                slot @ None => *slot = Some(g),
            }
            Ok(())
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = matmul(&g, &bv.transpose_last2()?)?;
                    let gb = matmul(&av.transpose_last2()?, &g)?;
                    accumulate(&mut grads, *a, reduce_to(ga, av.shape())?)?;
                    accumulate(&mut grads, *b, reduce_to(gb, bv.shape())?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddBroadcast(a, b) => {
                    let gb = g.sum_to_suffix(self.value(*b).shape())?;
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor))?,
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.data()[0])?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut gx = g.clone();
                    for (gr, yr) in gx
                        .data_mut()
                        .chunks_exact_mut(d)
                        .zip(y.data().chunks_exact(d))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gi, yi) in gr.iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (gx, ggamma, gbeta) =
                        layer_norm_backward(self.value(*x), self.value(*gamma), &g, *eps)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, ggamma)?;
                    accumulate(&mut grads, *beta, gbeta)?;
                }
                Op::Activation(a, kind) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (gi, &xi) in gx.data_mut().iter_mut().zip(x.data()) {
                        *gi *= kind.derivative(xi);
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let dim = tv.shape()[1];
                    let mut gt = Tensor::zeros(tv.shape())?;
                    for (row, &id) in g.data().chunks_exact(dim).zip(ids.data()) {
                        for (t, &v) in gt.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                            *t += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::SplitHeads(a) => accumulate(&mut grads, *a, merge_heads(&g)?)?,
                Op::MergeHeads(a) => {
                    let heads = self.value(*a).shape()[1];
                    accumulate(&mut grads, *a, split_heads(&g, heads)?)?;
                }
                Op::TransposeLast2(a) => accumulate(&mut grads, *a, g.transpose_last2()?)?,
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (gi, m) in gx.data_mut().iter_mut().zip(mask) {
                        *gi *= m;
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    counted,
                } => {
                    let z = self.value(*logits);
                    let v = z.last_dim();
                    let n = counted.iter().filter(|&&c| c).count() as f64;
                    let scale = g.data()[0] / n;
                    let mut gz = softmax_lastdim(z);
                    for ((row, &t), &c) in
                        gz.data_mut().chunks_exact_mut(v).zip(targets).zip(counted)
                    {
                        if c {
                            row[t] -= 1.0;
                            row.iter_mut().for_each(|r| *r *= scale);
                        } else {
                            row.iter_mut().for_each(|r| *r = 0.0);
                        }
                    }
                    accumulate(&mut grads, *logits, gz)?;
                }
            }
        }

        let mut out = GradMap::default();
        for (idx, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = match grads[idx].take() {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape())?,
                };
                out.insert(name.clone(), g);
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Leaf { name: Some(name) } = &node.op {
                out.insert(name.clone(), Tensor::zeros(node.value.shape())?);
            }
        }
        Ok(out)
    }
}

fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.last_dim();
    let mut gx = Tensor::zeros(x.shape())?;
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for ((xr, gr), out) in x
        .data()
        .chunks_exact(d)
        .zip(gy.data().chunks_exact(d))
        .zip(gx.data_mut().chunks_exact_mut(d))
    {
        let (mean, inv_std) = row_stats(xr, eps);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * inv_std;
            gxhat[j] = gr[j] * gamma.data()[j];
            ggamma[j] += gr[j] * xhat[j];
            gbeta[j] += gr[j];
        }
        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            out[j] = inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    Ok((
        gx,
        Tensor::new(vec![d], ggamma)?,
        Tensor::new(vec![d], gbeta)?,
    ))
}

/// Mean of `-log softmax(logits)[target]` over the positions whose `counted`
/// flag is set, using log-sum-exp. `logits` is `... × vocab` and `targets`
/// holds one id per logit row.
pub fn cross_entropy_masked(
    logits: &Tensor,
    targets: &IndexTensor,
    counted: &[bool],
) -> Result<Tensor> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    if targets.numel() != rows || counted.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (position, ((row, &t), &c)) in logits
        .data()
        .chunks_exact(v)
        .zip(targets.data())
        .zip(counted)
        .enumerate()
    {
        if t >= v {
            return Err(Error::Index {
                id: t,
                position,
                bound: v,
            });
        }
        if !c {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        total += (max - row[t]) + sum.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("cross_entropy over zero positions".into()));
    }
    Ok(Tensor::scalar(total / n as f64))
}

/// Mean cross-entropy over every `batch × seq` position.
pub fn cross_entropy(logits: &Tensor, targets: &IndexTensor) -> Result<Tensor> {
    cross_entropy_masked(logits, targets, &vec![true; targets.numel()])
}

/// Parameter leaves of a recorded model, by name.
pub type ParamVars = BTreeMap<String, Var>;

/// Records the full model forward pass on `tape`. Mirrors
/// [`crate::transformer::model_forward`] step for step, including the order
/// in which dropout masks are drawn from `rng`.
pub fn record_model_forward(
    tape: &mut Tape,
    tokens: &IndexTensor,
    p: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut PrngState,
) -> Result<(Var, ParamVars)> {
    cfg.validate()?;
    p.validate(cfg)?;
    let (batch, seq) = check_tokens(tokens, cfg)?;
    let vars: ParamVars = p
        .named()
        .into_iter()
        .map(|(name, t)| {
            let v = tape.param(name.clone(), t.clone());
            (name, v)
        })
        .collect();
    let pe = if cfg.positional_encoding {
        Some(tape.constant(position_rows(batch, seq, cfg)?))
    } else {
        None
    };
    let mask = if cfg.causal {
        Some(tape.constant(causal_mask(seq)?))
    } else {
        None
    };
    let eps = cfg.layer_norm_eps;
    let rate = cfg.dropout_rate;
    let att = cfg.attention();

    let mut x = tape.gather(vars["embedding"], tokens)?;
    if let Some(pe) = pe {
        x = tape.add(x, pe)?;
    }
    x = tape.dropout(x, rate, mode, rng)?;

    for l in 0..cfg.layer_count {
        let w = |n: &str| vars[&format!("blocks.{l}.{n}")];
        if cfg.per_layer_pe {
            if let Some(pe) = pe {
                x = tape.add(x, pe)?;
            }
        }
        let h = tape.layer_norm(x, w("norm1_gamma"), w("norm1_beta"), eps)?;
        let mut heads = Vec::with_capacity(3);
        for name in ["attention.w_query", "attention.w_key", "attention.w_value"] {
            let proj = tape.matmul(h, w(name))?;
            heads.push(tape.split_heads(proj, att.head_count)?);
        }
        let (q, k, v) = (heads[0], heads[1], heads[2]);
        let kt = tape.transpose_last2(k)?;
        let raw = tape.matmul(q, kt)?;
        let mut scores = tape.scale(raw, att.score_scale());
        if let Some(mask) = mask {
            scores = tape.add_broadcast(scores, mask)?;
        }
        let weights = tape.softmax(scores);
        let z = tape.matmul(weights, v)?;
        let z = tape.merge_heads(z)?;
        let attn = tape.matmul(z, w("attention.w_out"))?;
        let attn = tape.dropout(attn, rate, mode, rng)?;
        x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, w("norm2_gamma"), w("norm2_beta"), eps)?;
        let h = tape.matmul(h, w("ff_w1"))?;
        let h = tape.add_broadcast(h, w("ff_b1"))?;
        let h = tape.activation(h, cfg.activation);
        let h = tape.matmul(h, w("ff_w2"))?;
        let ff = tape.add_broadcast(h, w("ff_b2"))?;
        let ff = tape.dropout(ff, rate, mode, rng)?;
        x = tape.add(x, ff)?;
    }
    let logits = tape.matmul(x, vars["final_w"])?;
    let logits = tape.add_broadcast(logits, vars["final_b"])?;
    tape.value(logits).ensure_finite("logits")?;
    Ok((logits, vars))
}

/// `param - lr * grad`.
pub fn sgd_update(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let mut out = param.clone();
    for (p, g) in out.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(out)
}

/// Plain gradient descent over every model parameter. Every parameter must
/// have a gradient of matching shape.
pub fn sgd_step(params: &ModelParams, grads: &GradMap, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut next = params.clone();
    for (name, slot) in next.named_mut() {
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        *slot = sgd_update(slot, grad, lr)?;
    }
    Ok(next)
}
