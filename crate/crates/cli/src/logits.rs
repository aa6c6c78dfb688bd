//! Logits output formats.
//!
//! Text: one line per (sequence, position), the vocab scores in scientific
//! notation with 9 significant digits, separated by single spaces.
//!
//! Binary, little-endian: `u32` rank, `u64` dims, then the values as `f64`
//! in row-major order.

use std::fmt::Write as _;

use atinuke::Tensor;

pub fn to_text(logits: &Tensor) -> String {
    let v = logits.last_dim();
    let mut out = String::with_capacity(logits.numel() * 16);
    for row in logits.data().chunks_exact(v) {
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{x:.8e}");
        }
        out.push('\n');
    }
    out
}

pub fn to_binary(logits: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * logits.rank() + 8 * logits.numel());
    out.extend_from_slice(&(logits.rank() as u32).to_le_bytes());
    for &d in logits.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in logits.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}
