//! Model hyperparameters and their canonical text form.
//!
//! The text form is one `key = value` line per field, keys sorted
//! byte-wise, `\n` line endings. The same text is accepted as a config file
//! (where blank lines, `#` comments and omitted optional keys are allowed)
//! and embedded verbatim in checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::{AttentionConfig, ScaleDenominator};
use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    /// Accepted for parity with the reference constructor; no computation
    /// reads it.
    pub key_dim: usize,
    pub hidden_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub activation: Activation,
    pub causal: bool,
    /// Re-add the positional rows in front of every block.
    pub per_layer_pe: bool,
    /// Diagnostic switch; when false no positional rows are added anywhere.
    pub positional_encoding: bool,
    pub scale_denominator: ScaleDenominator,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

pub const DEFAULT_MAX_LEN: usize = 50_000;
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Defaults for everything except the five required sizes.
    pub fn new(
        vocab_size: usize,
        model_dim: usize,
        hidden_dim: usize,
        head_count: usize,
        layer_count: usize,
    ) -> Self {
        Self {
            vocab_size,
            model_dim,
            key_dim: model_dim,
            hidden_dim,
            head_count,
            layer_count,
            dropout_rate: 0.0,
            max_len: DEFAULT_MAX_LEN,
            activation: Activation::Relu,
            causal: false,
            per_layer_pe: false,
            positional_encoding: true,
            scale_denominator: ScaleDenominator::FullDim,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            seed: 0,
        }
    }

    /// The reference hyperparameters: vocab 10, width 18, key_dim 50,
    /// hidden 100, 2 heads, 3 layers, dropout 0.1.
    pub fn reference() -> Self {
        Self {
            key_dim: 50,
            dropout_rate: 0.1,
            ..Self::new(10, 18, 100, 2, 3)
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            head_count: self.head_count,
            model_dim: self.model_dim,
            causal: self.causal,
            scale_denominator: self.scale_denominator,
        }
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            v.push(format!(
                "model_dim must be even and positive (got {})",
                self.model_dim
            ));
        }
        if self.head_count == 0 {
            v.push("head_count must be at least 1".to_string());
        } else if !self.model_dim.is_multiple_of(self.head_count) {
            v.push(format!(
                "model_dim ({}) must be divisible by head_count ({})",
                self.model_dim, self.head_count
            ));
        }
        for (name, value) in [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("layer_count", self.layer_count),
            ("max_len", self.max_len),
        ] {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!(
                "dropout_rate must be in [0, 1) (got {})",
                self.dropout_rate
            ));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            v.push(format!(
                "layer_norm_eps must be positive (got {})",
                self.layer_norm_eps
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Non-fatal notes about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.key_dim != self.model_dim {
            w.push(format!(
                "key_dim = {} is retained but unused; attention projections are model_dim x model_dim",
                self.key_dim
            ));
        }
        w
    }

    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn fields(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("activation", self.activation.name().to_string()),
            ("causal", self.causal.to_string()),
            ("dropout_rate", format!("{:?}", self.dropout_rate)),
            ("head_count", self.head_count.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("layer_count", self.layer_count.to_string()),
            ("layer_norm_eps", format!("{:?}", self.layer_norm_eps)),
            ("max_len", self.max_len.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("per_layer_pe", self.per_layer_pe.to_string()),
            ("positional_encoding", self.positional_encoding.to_string()),
            (
                "scale_denominator",
                self.scale_denominator.name().to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ])
    }

    /// Parses config text. Does not validate the resulting values; call
    /// [`ModelConfig::validate`] for that.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if values.insert(k.to_string(), v.to_string()).is_some() {
                problems.push(format!("line {}: duplicate key `{k}`", lineno + 1));
            }
        }

        let mut take = |key: &str| values.remove(key);
        let mut cfg = Self::new(0, 0, 0, 0, 0);
        let mut key_dim_given = false;

        fn parse_into<T: std::str::FromStr>(
            key: &str,
            raw: Option<String>,
            required: bool,
            slot: &mut T,
            problems: &mut Vec<String>,
        ) -> bool {
            match raw {
                Some(s) => match s.parse() {
                    Ok(v) => {
                        *slot = v;
                        true
                    }
                    Err(_) => {
                        problems.push(format!("`{key}`: cannot parse `{s}`"));
                        false
                    }
                },
                None => {
                    if required {
                        problems.push(format!("missing required key `{key}`"));
                    }
                    false
                }
            }
        }

        parse_into(
            "vocab_size",
            take("vocab_size"),
            true,
            &mut cfg.vocab_size,
            &mut problems,
        );
        parse_into(
            "model_dim",
            take("model_dim"),
            true,
            &mut cfg.model_dim,
            &mut problems,
        );
        parse_into(
            "hidden_dim",
            take("hidden_dim"),
            true,
            &mut cfg.hidden_dim,
            &mut problems,
        );
        parse_into(
            "head_count",
            take("head_count"),
            true,
            &mut cfg.head_count,
            &mut problems,
        );
        parse_into(
            "layer_count",
            take("layer_count"),
            true,
            &mut cfg.layer_count,
            &mut problems,
        );
        key_dim_given |= parse_into(
            "key_dim",
            take("key_dim"),
            false,
            &mut cfg.key_dim,
            &mut problems,
        );
        parse_into(
            "dropout_rate",
            take("dropout_rate"),
            false,
            &mut cfg.dropout_rate,
            &mut problems,
        );
        parse_into(
            "max_len",
            take("max_len"),
            false,
            &mut cfg.max_len,
            &mut problems,
        );
        parse_into(
            "causal",
            take("causal"),
            false,
            &mut cfg.causal,
            &mut problems,
        );
        parse_into(
            "per_layer_pe",
            take("per_layer_pe"),
            false,
            &mut cfg.per_layer_pe,
            &mut problems,
        );
        parse_into(
            "positional_encoding",
            take("positional_encoding"),
            false,
            &mut cfg.positional_encoding,
            &mut problems,
        );
        parse_into(
            "layer_norm_eps",
            take("layer_norm_eps"),
            false,
            &mut cfg.layer_norm_eps,
            &mut problems,
        );
        parse_into("seed", take("seed"), false, &mut cfg.seed, &mut problems);

        if let Some(s) = take("activation") {
            match Activation::parse(&s) {
                Some(a) => cfg.activation = a,
                None => problems.push(format!("`activation`: expected relu or gelu, got `{s}`")),
            }
        }
        if let Some(s) = take("scale_denominator") {
            match ScaleDenominator::parse(&s) {
                Some(d) => cfg.scale_denominator = d,
                None => problems.push(format!(
                    "`scale_denominator`: expected full_dim or head_dim, got `{s}`"
                )),
            }
        }
        for unknown in values.keys() {
            problems.push(format!("unknown key `{unknown}`"));
        }
        if !key_dim_given {
            cfg.key_dim = cfg.model_dim;
        }

        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }
}
