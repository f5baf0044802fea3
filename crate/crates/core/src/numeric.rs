//! Dense gradient vectors and compensated accumulation.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat vector in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut acc = NeumaierSum::default();
        for (a, b) in self.0.iter().zip(&other.0) {
            acc.add(a * b);
        }
        acc.value()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &GradientVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut acc = NeumaierSum::default();
        for (a, b) in self.0.iter().zip(&other.0) {
            let d = a - b;
            acc.add(d * d);
        }
        acc.value()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "gradient has dimension {}, expected {dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Element-wise compensated accumulator for vectors.
#[derive(Debug, Clone)]
pub struct VectorAccumulator {
    sums: Vec<NeumaierSum>,
}

impl VectorAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sums: vec![NeumaierSum::default(); dim],
        }
    }

    pub fn add_scaled(&mut self, v: &GradientVector, scale: f64) {
        debug_assert_eq!(self.sums.len(), v.dim());
        for (acc, x) in self.sums.iter_mut().zip(v.as_slice()) {
            acc.add(scale * x);
        }
    }

    pub fn add_at(&mut self, index: usize, x: f64) {
        self.sums[index].add(x);
    }

    pub fn finish(&self) -> GradientVector {
        GradientVector(self.sums.iter().map(NeumaierSum::value).collect())
    }
}

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
