//! Dense n-dimensional tensor of 64-bit floats.
//!
//! Row-major layout throughout; image tensors use NCHW order. Tensors are
//! plain immutable-by-convention values: all differentiable arithmetic goes
//! through the tape in [`crate::tape`].

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major f64 array with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArg(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArg(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one element (shape `[]` or `[1]`
    /// or any all-ones shape).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same data viewed under a different shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Biased (population) variance over all elements.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    /// Flat offset for an NCHW index.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Relative-or-absolute gradient comparison used by every gradient check:
/// elements with |reference| below `abs_switch` are compared absolutely
/// (tolerance `abs_tol`), the rest relatively (tolerance `rel_tol`).
pub fn grad_close(
    analytic: &Tensor,
    reference: &Tensor,
    rel_tol: f64,
    abs_switch: f64,
    abs_tol: f64,
) -> std::result::Result<(), String> {
    if analytic.shape() != reference.shape() {
        return Err(format!(
            "shape mismatch {:?} vs {:?}",
            analytic.shape(),
            reference.shape()
        ));
    }
    for (i, (&a, &r)) in analytic
        .data()
        .iter()
        .zip(reference.data().iter())
        .enumerate()
    {
        if a.abs() < abs_switch && r.abs() < abs_switch {
            if (a - r).abs() > abs_tol {
                return Err(format!(
                    "element {i}: analytic {a} vs reference {r}, abs err {} > {abs_tol}",
                    (a - r).abs()
                ));
            }
        } else {
            let denom = r.abs().max(a.abs());
            let rel = (a - r).abs() / denom;
            if rel > rel_tol {
                return Err(format!(
                    "element {i}: analytic {a} vs reference {r}, rel err {rel} > {rel_tol}"
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn variance_is_population_variance() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t.mean() - 2.5).abs() < 1e-15);
        assert!((t.variance() - 1.25).abs() < 1e-15);
    }
}
