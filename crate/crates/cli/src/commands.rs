//! Subcommand implementations. Each returns `Ok` or a [`CliError`] that
//! carries the process exit code.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use atinuke::checkpoint;
use atinuke::gradcheck;
use atinuke::toy::{train_copy, TrainOptions};
use atinuke::transformer::model_forward;
use atinuke::{Error, Mode, ModelConfig, ModelParams, PrngState};

use crate::logits;
use crate::tokens;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Output could not be written or another failure outside the contract.
    Other(String),
    Config(Vec<String>),
    Input(String),
    Verification(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Other(_) => 1,
            Self::Config(_) => 2,
            Self::Input(_) => 3,
            Self::Verification(_) => 4,
            Self::Divergence(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(problems) => {
                write!(f, "invalid configuration:")?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
            Self::Other(m) | Self::Input(m) | Self::Verification(m) | Self::Divergence(m) => {
                f.write_str(m)
            }
        }
    }
}

fn config_error(e: Error) -> CliError {
    match e {
        Error::Config(problems) => CliError::Config(problems),
        other => CliError::Config(vec![other.to_string()]),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<(), CliError> {
    checkpoint::save(params, cfg, path)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

pub fn init(
    config_path: &Path,
    seed: Option<u64>,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::Config(vec![format!("cannot read {}: {e}", config_path.display())])
    })?;
    let mut cfg = ModelConfig::parse(&text).map_err(config_error)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_error)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let params = ModelParams::init(&cfg, &mut PrngState::new(cfg.seed)).map_err(config_error)?;
    save_checkpoint(&params, &cfg, out)?;
    let _ = writeln!(stdout, "parameters: {}", params.parameter_count());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitsFormat {
    Text,
    Binary,
}

pub fn forward(
    checkpoint_path: &Path,
    input: &Path,
    output: &Path,
    format: LogitsFormat,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let (params, cfg) = checkpoint::load(checkpoint_path)
        .map_err(|e| CliError::Input(format!("checkpoint {}: {e}", checkpoint_path.display())))?;
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", input.display())))?;
    let batch = tokens::parse(&text).map_err(|e| CliError::Input(e.to_string()))?;
    tokens::check(&batch, &text, cfg.vocab_size, cfg.max_len)
        .map_err(|e| CliError::Input(e.to_string()))?;

    let logits = model_forward(
        &batch,
        &params,
        &cfg,
        Mode::Eval,
        &mut PrngState::new(cfg.seed),
    )
    .map_err(|e| match e {
        Error::NonFinite(m) => CliError::Divergence(format!("non-finite value in {m}")),
        other => CliError::Input(other.to_string()),
    })?;
    let bytes = match format {
        LogitsFormat::Text => logits::to_text(&logits).into_bytes(),
        LogitsFormat::Binary => logits::to_binary(&logits),
    };
    write_file(output, &bytes)?;
    let dims: Vec<String> = logits.shape().iter().map(usize::to_string).collect();
    let _ = writeln!(stdout, "shape: {}", dims.join("×"));
    Ok(())
}

pub fn gradcheck(seed: u64, tolerance: f64, stdout: &mut dyn Write) -> Result<(), CliError> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(CliError::Config(vec![format!(
            "tolerance must be positive, got {tolerance}"
        )]));
    }
    let report = gradcheck::run(seed, tolerance).map_err(|e| CliError::Other(e.to_string()))?;
    let _ = write!(stdout, "{}", report.render());
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let mut msg = format!(
        "{} coordinates exceed tolerance {tolerance:e}:",
        failures.len()
    );
    for (name, c) in &failures {
        msg.push_str(&format!(
            "\n  {name} {:?}: analytic {:e}, numeric {:e}, rel error {:e}",
            c.index, c.analytic, c.numeric, c.rel_error
        ));
    }
    Err(CliError::Verification(msg))
}

pub fn train_toy(
    steps: usize,
    seed: u64,
    learning_rate: f64,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let mut problems = Vec::new();
    if steps == 0 {
        problems.push("steps must be at least 1".to_string());
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        problems.push(format!(
            "learning rate must be positive, got {learning_rate}"
        ));
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let opts = TrainOptions {
        steps,
        seed,
        learning_rate,
        ..TrainOptions::default()
    };
    let report = train_copy(&opts, |step, loss| {
        let _ = writeln!(stdout, "step {step:>5}  loss {loss:.6}");
    })
    .map_err(|e| match e {
        Error::NonFinite(m) => CliError::Divergence(format!("training diverged: non-finite {m}")),
        other => CliError::Other(other.to_string()),
    })?;
    let _ = writeln!(stdout, "held-out loss {:.6}", report.heldout_loss);
    save_checkpoint(&report.params, &report.config, out)
}
