//! Central finite-difference verification of the tape gradients.
//!
//! Numeric derivatives are taken through [`model_forward`] and
//! [`cross_entropy`], which do not touch the tape, so the two sides of each
//! comparison are computed by independent code paths.

use std::fmt::Write as _;

use crate::autodiff::{cross_entropy, record_model_forward, GradMap, Tape};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::rng::PrngState;
use crate::tensor::{Activation, IndexTensor};
use crate::transformer::{model_forward, Mode, ModelParams};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// The fixed model used by the end-to-end check: one layer, width 4, two
/// heads, vocab 5, sequences of 3 tokens. Causal, GELU and train-mode
/// dropout are on so every backward rule is exercised.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(5, 4, 8, 2, 1);
    cfg.activation = Activation::Gelu;
    cfg.causal = true;
    cfg.dropout_rate = 0.1;
    cfg.max_len = 16;
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checks: Vec<CoordinateCheck>,
}

impl GroupReport {
    pub fn worst(&self) -> &CoordinateCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("groups are never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn coordinates(&self) -> usize {
        self.groups.iter().map(|g| g.checks.len()).sum()
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.worst().rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }

    /// Every coordinate above tolerance, with its parameter name.
    pub fn failures(&self) -> Vec<(&str, &CoordinateCheck)> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.checks
                    .iter()
                    .filter(|c| c.rel_error > self.tolerance)
                    .map(|c| (g.name.as_str(), c))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(0);
        for g in &self.groups {
            let w = g.worst();
            let _ = writeln!(
                out,
                "{:width$}  worst rel err {:.3e} at {:?}",
                g.name, w.rel_error, w.index
            );
        }
        let _ = writeln!(
            out,
            "checked {} coordinates, worst {:.3e}, tolerance {:.1e}",
            self.coordinates(),
            self.worst(),
            self.tolerance
        );
        out
    }
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &d) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}

fn set_coordinate(p: &mut ModelParams, name: &str, flat: usize, value: f64) {
    let (_, t) = p
        .named_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("known parameter");
    t.data_mut()[flat] = value;
}

/// Analytic gradients of the mean cross-entropy from the tape.
pub fn analytic_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &IndexTensor,
    targets: &IndexTensor,
    mode: Mode,
    dropout_seed: u64,
) -> Result<GradMap> {
    let mut tape = Tape::new();
    let (logits, _) = record_model_forward(
        &mut tape,
        tokens,
        params,
        cfg,
        mode,
        &mut PrngState::new(dropout_seed),
    )?;
    let loss = tape.cross_entropy(logits, targets, None)?;
    tape.backward(loss)
}

/// Loss through the plain forward path, reseeding dropout every call so
/// every evaluation samples the same masks.
pub fn numeric_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &IndexTensor,
    targets: &IndexTensor,
    mode: Mode,
    dropout_seed: u64,
) -> Result<f64> {
    let logits = model_forward(tokens, params, cfg, mode, &mut PrngState::new(dropout_seed))?;
    Ok(cross_entropy(&logits, targets)?.data()[0])
}

/// Checks every coordinate of every parameter.
#[allow(clippy::too_many_arguments)]
pub fn check_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &IndexTensor,
    targets: &IndexTensor,
    mode: Mode,
    dropout_seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let grads = analytic_gradients(params, cfg, tokens, targets, mode, dropout_seed)?;
    let mut groups = Vec::new();
    let names: Vec<(String, Vec<usize>, usize)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.numel()))
        .collect();
    let mut probe = params.clone();
    for (name, shape, numel) in names {
        let grad = grads
            .get(&name)
            .expect("tape reports every parameter")
            .clone();
        let mut checks = Vec::with_capacity(numel);
        for flat in 0..numel {
            let original = params.get(&name).unwrap().data()[flat];
            set_coordinate(&mut probe, &name, flat, original + step);
            let plus = numeric_loss(&probe, cfg, tokens, targets, mode, dropout_seed)?;
            set_coordinate(&mut probe, &name, flat, original - step);
            let minus = numeric_loss(&probe, cfg, tokens, targets, mode, dropout_seed)?;
            set_coordinate(&mut probe, &name, flat, original);

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grad.data()[flat];
            checks.push(CoordinateCheck {
                index: unflatten(flat, &shape),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
        groups.push(GroupReport { name, checks });
    }
    Ok(GradcheckReport { groups, tolerance })
}

/// The end-to-end check on [`tiny_config`]: parameters, a 2×3 token batch
/// and its targets are all drawn from `seed`.
pub fn run(seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let cfg = tiny_config();
    let mut rng = PrngState::new(seed);
    let params = ModelParams::init(&cfg, &mut rng)?;
    let (batch, seq) = (2, 3);
    let draw = |rng: &mut PrngState| -> Vec<usize> {
        (0..batch * seq)
            .map(|_| rng.below(cfg.vocab_size))
            .collect()
    };
    let tokens = IndexTensor::new(vec![batch, seq], draw(&mut rng))?;
    let targets = IndexTensor::new(vec![batch, seq], draw(&mut rng))?;
    let dropout_seed = seed.wrapping_add(1);
    check_model(
        &params,
        &cfg,
        &tokens,
        &targets,
        Mode::Train,
        dropout_seed,
        DEFAULT_STEP,
        tolerance,
    )
}
