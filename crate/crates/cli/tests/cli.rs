use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atinuke::checkpoint::{self, Dtype};
use atinuke::toy::TrainOptions;
use atinuke::{ModelParams, PrngState};
use tempfile::TempDir;

const REFERENCE: &str = "\
# reference model
vocab_size = 10
model_dim = 18
key_dim = 50
hidden_dim = 100
head_count = 2
layer_count = 3
dropout_rate = 0.1
";

fn atinuke(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atinuke"))
        .args(args)
        .env_remove("ATINUKE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn init_reference(dir: &TempDir, seed: &str) -> PathBuf {
    let cfg = write(dir, "reference.cfg", REFERENCE);
    let out = dir.path().join(format!("ref-{seed}.atnk"));
    let o = atinuke(&["init", path(&cfg), "--seed", seed, "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn token_lines(rows: usize, cols: usize, vocab: usize) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| ((r * 7 + c * 3) % vocab).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[test]
fn init_reports_parameter_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "reference.cfg", REFERENCE);
    let out = dir.path().join("m.atnk");
    let o = atinuke(&["init", path(&cfg), "--seed", "1", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "parameters: 15628\n");
    assert!(
        stderr(&o).contains("key_dim"),
        "expected key_dim warning: {}",
        stderr(&o)
    );
    let (p, cfg) = checkpoint::load(&out).unwrap();
    assert_eq!(p.parameter_count(), 15628);
    assert_eq!(cfg.seed, 1);
}

#[test]
fn init_rejects_indivisible_width() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "bad.cfg",
        "vocab_size = 10\nmodel_dim = 7\nhidden_dim = 8\nhead_count = 2\nlayer_count = 1\n",
    );
    let out = dir.path().join("m.atnk");
    let o = atinuke(&["init", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("divisible"), "{err}");
    assert!(err.contains("even"), "{err}");
    assert!(!out.exists());
}

#[test]
fn init_lists_every_config_problem() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "bad.cfg",
        "vocab_size = ten\nmodel_dim = 4\nbogus = 1\n",
    );
    let o = atinuke(&["init", path(&cfg), "--out", path(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in [
        "vocab_size",
        "bogus",
        "hidden_dim",
        "head_count",
        "layer_count",
    ] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let a = fs::read(init_reference(&dir, "5")).unwrap();
    let b = fs::read(init_reference(&dir, "5")).unwrap();
    let c = fs::read(init_reference(&dir, "6")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let explicit = fs::read(init_reference(&dir, "42")).unwrap();
    let cfg = dir.path().join("reference.cfg");
    let out = dir.path().join("env.atnk");
    let o = Command::new(env!("CARGO_BIN_EXE_atinuke"))
        .args(["init", path(&cfg), "--out", path(&out)])
        .env("ATINUKE_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&out).unwrap(), explicit);
}

#[test]
fn forward_reference_batch() {
    let dir = TempDir::new().unwrap();
    let ckpt = init_reference(&dir, "3");
    let input = write(&dir, "tokens.txt", &token_lines(25, 100, 10));
    let text_out = dir.path().join("logits.txt");
    let o = atinuke(&[
        "forward",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&text_out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "shape: 25×100×10\n");
    let text = fs::read_to_string(&text_out).unwrap();
    assert_eq!(text.lines().count(), 2500);
    for line in text.lines() {
        let fields: Vec<f64> = line.split(' ').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 10);
    }

    let bin_out = dir.path().join("logits.bin");
    let o = atinuke(&[
        "forward",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&bin_out),
        "--format",
        "binary",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = fs::read(&bin_out).unwrap();
    assert_eq!(bytes.len(), 4 + 3 * 8 + 25 * 100 * 10 * 8);
    let first = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
    let printed: f64 = text.split(' ').next().unwrap().parse().unwrap();
    assert!((first - printed).abs() <= 1e-8 * first.abs().max(1e-300));
}

#[test]
fn forward_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let ckpt = init_reference(&dir, "9");
    let input = write(&dir, "tokens.txt", &token_lines(3, 7, 10));
    let mut outputs = Vec::new();
    for name in ["a.txt", "b.txt"] {
        let out = dir.path().join(name);
        let o = atinuke(&[
            "forward",
            "--checkpoint",
            path(&ckpt),
            "--input",
            path(&input),
            "--output",
            path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0));
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn forward_input_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let ckpt = init_reference(&dir, "1");
    let out = dir.path().join("out.txt");
    let run = |text: &str| {
        let input = write(&dir, "tokens.txt", text);
        atinuke(&[
            "forward",
            "--checkpoint",
            path(&ckpt),
            "--input",
            path(&input),
            "--output",
            path(&out),
        ])
    };

    let o = run("");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no sequences"));

    let o = run("1 2 3\n4 10 5\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2, column 3"), "{}", stderr(&o));

    let o = run("1 2 3\n4 5\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ragged"));

    let o = run("1 2 3 \n");
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn forward_rejects_sequences_beyond_max_len() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "short.cfg",
        "vocab_size = 5\nmodel_dim = 4\nhidden_dim = 8\nhead_count = 2\nlayer_count = 1\nmax_len = 4\n",
    );
    let ckpt = dir.path().join("short.atnk");
    assert_eq!(
        atinuke(&["init", path(&cfg), "--out", path(&ckpt)])
            .status
            .code(),
        Some(0)
    );
    let input = write(&dir, "tokens.txt", "1 2 3 4 0\n");
    let o = atinuke(&[
        "forward",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("max_len 4"));
}

#[test]
fn forward_rejects_damaged_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = init_reference(&dir, "1");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let input = write(&dir, "tokens.txt", "1 2\n");
    let o = atinuke(&[
        "forward",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = atinuke(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let report = stdout(&a);
    assert!(report.contains("final_w"));
    assert!(report.contains("checked 201 coordinates"));
    let b = atinuke(&["gradcheck", "--seed", "3"]);
    assert_eq!(stdout(&b), report);
}

#[test]
fn gradcheck_unreachable_tolerance_exits_4() {
    let o = atinuke(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("exceed tolerance"));
    assert!(
        err.contains("blocks.0.") || err.contains("embedding") || err.contains("final_"),
        "{err}"
    );
    assert!(err.contains('['), "coordinates missing: {err}");
}

#[test]
fn train_toy_single_step_changes_parameters() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("toy.atnk");
    let o = atinuke(&[
        "train-toy",
        "--task",
        "copy",
        "--steps",
        "1",
        "--seed",
        "7",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("step     1"));
    let opts = TrainOptions {
        seed: 7,
        ..TrainOptions::default()
    };
    let cfg = opts.model_config();
    let init = ModelParams::init(&cfg, &mut PrngState::new(7)).unwrap();
    let (trained, trained_cfg) = checkpoint::load(&out).unwrap();
    assert_eq!(trained_cfg, cfg);
    assert_ne!(trained, init);
    assert_ne!(
        fs::read(&out).unwrap(),
        checkpoint::to_bytes(&init, &cfg, Dtype::F64)
    );
}

#[test]
fn train_toy_runs_replay_identically() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = atinuke(&[
            "train-toy",
            "--steps",
            "200",
            "--seed",
            "3",
            "--out",
            path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0));
        (stdout(&o), fs::read(out).unwrap())
    };
    let (log_a, ckpt_a) = run("a.atnk");
    let (log_b, ckpt_b) = run("b.atnk");
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(log_a.lines().filter(|l| l.starts_with("step")).count(), 2);
}

#[test]
fn train_toy_argument_and_divergence_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("toy.atnk");
    let o = atinuke(&["train-toy", "--steps", "0", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = atinuke(&[
        "train-toy",
        "--steps",
        "300",
        "--learning-rate",
        "10",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(!out.exists());
}
