//! Dense row-major tensors with an explicit shape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "tensor needs at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_dims(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("holds {n} elements but {} were given", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_dims(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_dims(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    /// Converts an `f64` array, useful for literals in tests and I/O.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (the batch axis for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_dims(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(T::one(), other)
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: format!("row index {i} out of range"),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(&shape, data)
    }

    /// Contiguous range of leading-axis slices.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("row range {start}..{end} invalid"),
            });
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(&shape, self.data[start * w..end * w].to_vec())
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a 2-d tensor"),
            }),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a 4-d tensor"),
            }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
