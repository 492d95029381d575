//! Dense f64 tensors, reverse-mode differentiation, and optimization.
//!
//! Everything numeric in this crate is rank-2 row-major f64. Flat data such
//! as an image lives in a single row; batches stack rows. [`Tensor`] is plain
//! storage; differentiable graphs are built on a [`tape::Tape`] from leased
//! copies of the stored parameters, one fresh tape per training step.

pub mod adam;
pub mod checkpoint;
pub mod fd;
pub mod tape;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Tensor { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    pub fn row_vec(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            values,
        }
    }

    /// Gaussian init, scaled; the usual fan-in scheme is `std = 1/sqrt(fan_in)`.
    pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Stacks rows of equal length into one matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::InvalidShape(format!(
                    "ragged rows: {} vs {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, values)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Named, ordered parameter collection. Order is creation order and is part
/// of the public behavior: checkpoints, gradient vectors, and optimizer
/// slots all index parameters by that order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name.to_owned(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked_construction() {
        assert!(Tensor::new(2, 3, vec![0.0; 6]).is_ok());
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn param_order_is_stable() {
        let mut p = ParamSet::new();
        let a = p.push("a", Tensor::zeros(1, 2));
        let b = p.push("b", Tensor::zeros(2, 2));
        assert_eq!(a, ParamId(0));
        assert_eq!(b, ParamId(1));
        assert_eq!(p.name(ParamId(1)), "b");
        assert_eq!(p.total_len(), 6);
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_owned()).collect();
        assert_eq!(names, ["a", "b"]);
    }
}
