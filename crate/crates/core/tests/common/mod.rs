//! Reference implementations written with plain nested loops over
//! `Vec<Vec<f64>>`, sharing no kernels with the library.
#![allow(dead_code)]

use atinuke::{
    Activation, IndexTensor, ModelConfig, ModelParams, PrngState, ScaleDenominator, Tensor,
};

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(shape: &[usize], rng: &mut PrngState, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_tokens(batch: usize, seq: usize, vocab: usize, rng: &mut PrngState) -> IndexTensor {
    IndexTensor::new(
        vec![batch, seq],
        (0..batch * seq).map(|_| rng.below(vocab)).collect(),
    )
    .unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let [r, c] = *t.shape() else {
        panic!("expected rank 2, got {:?}", t.shape())
    };
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

/// Splits a `b × s × d` tensor into `b` matrices.
pub fn to_batches(t: &Tensor) -> Vec<Mat> {
    let [b, s, d] = *t.shape() else {
        panic!("expected rank 3, got {:?}", t.shape())
    };
    (0..b)
        .map(|bi| {
            (0..s)
                .map(|si| t.data()[(bi * s + si) * d..(bi * s + si + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, v)| gamma[i] * (v - mean) / denom + beta[i])
        .collect()
}

/// erf by its Maclaurin series; only trusted for moderate arguments.
pub fn erf_series(x: f64) -> f64 {
    assert!(x.abs() < 3.5, "series oracle used outside its range: {x}");
    let mut term = x;
    let mut sum = x;
    for n in 1..120 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn activation_oracle(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Gelu => 0.5 * v * (1.0 + erf_series(v / 2f64.sqrt())),
    }
}

/// Multi-head self-attention on one sequence, one head and one query at a
/// time.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn attention_oracle(
    x: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    heads: usize,
    causal: bool,
    denominator: ScaleDenominator,
) -> Mat {
    let s = x.len();
    let d = x[0].len();
    let hd = d / heads;
    let q = naive_matmul(x, wq);
    let k = naive_matmul(x, wk);
    let v = naive_matmul(x, wv);
    let scale_dim = match denominator {
        ScaleDenominator::FullDim => d,
        ScaleDenominator::HeadDim => hd,
    };
    let mut z = vec![vec![0.0; d]; s];
    for h in 0..heads {
        for t in 0..s {
            let visible = if causal { t + 1 } else { s };
            let mut scores = Vec::with_capacity(visible);
            for u in 0..visible {
                let mut dot = 0.0;
                for j in 0..hd {
                    dot += q[t][h * hd + j] * k[u][h * hd + j];
                }
                scores.push(dot / (scale_dim as f64).sqrt());
            }
            let w = softmax_row(&scores);
            for j in 0..hd {
                let mut acc = 0.0;
                for u in 0..visible {
                    acc += w[u] * v[u][h * hd + j];
                }
                z[t][h * hd + j] = acc;
            }
        }
    }
    naive_matmul(&z, wo)
}

pub fn sinusoid(pos: usize, col: usize, d: usize) -> f64 {
    let pair = (col / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if col.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn add_mat(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(bias).map(|(x, y)| x + y).collect())
        .collect()
}

/// Eval-mode logits for one sequence, written out step by step.
pub fn model_oracle(tokens: &[usize], p: &ModelParams, cfg: &ModelConfig) -> Mat {
    let d = cfg.model_dim;
    let emb = to_mat(&p.embedding);
    let pe: Mat = (0..tokens.len())
        .map(|pos| {
            (0..d)
                .map(|c| {
                    if cfg.positional_encoding {
                        sinusoid(pos, c, d)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut x: Mat = tokens.iter().map(|&t| emb[t].clone()).collect();
    x = add_mat(&x, &pe);
    for b in &p.blocks {
        if cfg.per_layer_pe {
            x = add_mat(&x, &pe);
        }
        let n1: Mat = x
            .iter()
            .map(|r| {
                layer_norm_row(
                    r,
                    b.norm1_gamma.data(),
                    b.norm1_beta.data(),
                    cfg.layer_norm_eps,
                )
            })
            .collect();
        let a = attention_oracle(
            &n1,
            &to_mat(&b.attention.w_query),
            &to_mat(&b.attention.w_key),
            &to_mat(&b.attention.w_value),
            &to_mat(&b.attention.w_out),
            cfg.head_count,
            cfg.causal,
            cfg.scale_denominator,
        );
        x = add_mat(&x, &a);
        let n2: Mat = x
            .iter()
            .map(|r| {
                layer_norm_row(
                    r,
                    b.norm2_gamma.data(),
                    b.norm2_beta.data(),
                    cfg.layer_norm_eps,
                )
            })
            .collect();
        let hidden = add_bias(&naive_matmul(&n2, &to_mat(&b.ff_w1)), b.ff_b1.data());
        let hidden: Mat = hidden
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| activation_oracle(cfg.activation, v))
                    .collect()
            })
            .collect();
        let ff = add_bias(&naive_matmul(&hidden, &to_mat(&b.ff_w2)), b.ff_b2.data());
        x = add_mat(&x, &ff);
    }
    add_bias(&naive_matmul(&x, &to_mat(&p.final_w)), p.final_b.data())
}

/// Counts parameters by walking the module tree of the reference model
/// layout: embedding, per layer four square projections, two linears with
/// bias and two layer norms, then the output linear with bias.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    #[derive(Clone, Copy)]
    enum Module {
        Embedding(usize, usize),
        Linear {
            fan_in: usize,
            fan_out: usize,
            bias: bool,
        },
        LayerNorm(usize),
    }
    let (v, d, h) = (cfg.vocab_size, cfg.model_dim, cfg.hidden_dim);
    let mut tree = vec![Module::Embedding(v, d)];
    for _ in 0..cfg.layer_count {
        for _ in 0..4 {
            tree.push(Module::Linear {
                fan_in: d,
                fan_out: d,
                bias: false,
            });
        }
        tree.push(Module::Linear {
            fan_in: d,
            fan_out: h,
            bias: true,
        });
        tree.push(Module::Linear {
            fan_in: h,
            fan_out: d,
            bias: true,
        });
        tree.push(Module::LayerNorm(d));
        tree.push(Module::LayerNorm(d));
    }
    tree.push(Module::Linear {
        fan_in: d,
        fan_out: v,
        bias: true,
    });
    tree.iter()
        .map(|m| match *m {
            Module::Embedding(n, w) => n * w,
            Module::Linear {
                fan_in,
                fan_out,
                bias,
            } => fan_in * fan_out + if bias { fan_out } else { 0 },
            Module::LayerNorm(n) => 2 * n,
        })
        .sum()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}
