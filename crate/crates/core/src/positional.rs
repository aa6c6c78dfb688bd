//! Fixed sinusoidal position table.
//!
//! Row `pos`, column `2i` holds `sin(pos / 10000^(2i/d))` and column `2i+1`
//! holds the cosine of the same angle. The table has no learnable state.

use crate::error::{Error, Result};
use crate::tensor::{IndexTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    max_len: usize,
    model_dim: usize,
    table: Tensor,
}

/// Angle divisor `10000^(2i/model_dim)` for column pair `i`.
pub fn divisor(pair: usize, model_dim: usize) -> f64 {
    10000f64.powf((2 * pair) as f64 / model_dim as f64)
}

impl PositionalTable {
    pub fn build(model_dim: usize, max_len: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if model_dim == 0 || !model_dim.is_multiple_of(2) {
            problems.push(format!(
                "model_dim must be even and positive, got {model_dim}"
            ));
        }
        if max_len == 0 {
            problems.push("max_len must be at least 1".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }

        let divisors: Vec<f64> = (0..model_dim / 2).map(|i| divisor(i, model_dim)).collect();
        let mut data = vec![0.0; max_len * model_dim];
        for (pos, row) in data.chunks_exact_mut(model_dim).enumerate() {
            for (i, div) in divisors.iter().enumerate() {
                let angle = pos as f64 / div;
                row[2 * i] = angle.sin();
                row[2 * i + 1] = angle.cos();
            }
        }
        Ok(Self {
            max_len,
            model_dim,
            table: Tensor::new(vec![max_len, model_dim], data)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.table.data()[pos * self.model_dim..(pos + 1) * self.model_dim]
    }

    /// Gathers one table row per position; output shape is
    /// `positions.shape() ++ [model_dim]`.
    pub fn lookup(&self, positions: &IndexTensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(positions.numel() * self.model_dim);
        for &pos in positions.data() {
            if pos >= self.max_len {
                return Err(Error::PositionRange {
                    position: pos,
                    max_len: self.max_len,
                });
            }
            data.extend_from_slice(self.row(pos));
        }
        let mut shape = positions.shape().to_vec();
        shape.push(self.model_dim);
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_zero_alternates() {
        for dim in [2, 4, 18] {
            let pe = PositionalTable::build(dim, 3).unwrap();
            for (j, &v) in pe.row(0).iter().enumerate() {
                assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn spot_values() {
        let pe = PositionalTable::build(2, 2).unwrap();
        assert!((pe.row(1)[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((pe.row(1)[1] - 0.540_302_305_868_139_7).abs() < 1e-12);

        assert_eq!(divisor(1, 4), 100.0);
        let pe = PositionalTable::build(4, 3).unwrap();
        assert!((pe.row(2)[2] - 0.019_998_666_693_333_08).abs() < 1e-12);
        assert!((pe.row(2)[3] - 0.999_800_006_666_577_8).abs() < 1e-12);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(
            PositionalTable::build(7, 10),
            Err(Error::Config(_))
        ));
        assert!(PositionalTable::build(4, 0).is_err());
    }

    #[test]
    fn entries_bounded() {
        let pe = PositionalTable::build(16, 200).unwrap();
        assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn lookup_shapes_and_errors() {
        let pe = PositionalTable::build(4, 8).unwrap();
        let one = pe
            .lookup(&IndexTensor::new(vec![1, 1], vec![0]).unwrap())
            .unwrap();
        assert_eq!(one.shape(), &[1, 1, 4]);
        assert_eq!(one.data(), &[0.0, 1.0, 0.0, 1.0]);

        let two = pe.lookup(&IndexTensor::positions(2, 2).unwrap()).unwrap();
        assert_eq!(two.data()[..8], two.data()[8..]);

        let err = pe
            .lookup(&IndexTensor::new(vec![1, 1], vec![8]).unwrap())
            .unwrap_err();
        assert_eq!(
            err,
            Error::PositionRange {
                position: 8,
                max_len: 8
            }
        );
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(
            PositionalTable::build(6, 50).unwrap(),
            PositionalTable::build(6, 50).unwrap()
        );
    }
}
