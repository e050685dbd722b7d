//! Dense float64 tensors and the reverse-mode tape built on them.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_inputs};
pub use tape::{Activation, Axis, Tape, TensorId, LN_EPS};

pub(crate) use tape::mean_std;

use crate::error::{Error, Result};

/// Dense real-valued n-dimensional array, row-major, always finite.
///
/// `requires_grad` and `grad` only become meaningful once the tensor lives on
/// a [`Tape`]; free-standing tensors are plain immutable value carriers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating extent product and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape("tensor.new", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor.new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor.new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[f64]) -> Result<Self> {
        Tensor::new(vec![data.len()], data.to_vec())
    }

    /// 2-D tensor from rows; every row must have the same length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("tensor.matrix", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Mutable payload access. The caller is responsible for keeping values
    /// finite (the optimizer re-checks before writing).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replace the payload (same length), revalidating finiteness.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape("tensor.set_data", "length change"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor.set_data" });
        }
        self.data = data;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn nan_rejected() {
        let e = Tensor::new(vec![2], vec![f64::NAN, 0.0]);
        assert!(matches!(e, Err(Error::NonFinite { .. })));
        let e = Tensor::new(vec![1], vec![f64::INFINITY]);
        assert!(matches!(e, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn row_access() {
        let t = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.at2(0, 1), 2.0);
    }
}
