use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense row-major `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![data.len()] });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: other.shape.clone() });
        }
        Ok(())
    }

    /// Elementwise `f(a, b)` over two arrays of identical shape.
    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Array { shape: self.shape.clone(), data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Array) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }
}
