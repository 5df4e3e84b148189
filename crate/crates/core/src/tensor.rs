//! Dense row-major tensors and the handful of kernels the toy pipeline needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Scalar>(data: &[T], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl<T: Scalar> Tensor<T> {
    /// Validates length against `shape` and rejects NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        check_finite(&data, "tensor data")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel_of(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Build a matrix from rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access skips the finiteness check; callers that may produce
    /// non-finite values must call [`Tensor::ensure_finite`].
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "{op} needs a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element (r, c) of a matrix. Panics when out of range.
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let rrow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(rrow) {
                    *o = *o + a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    fn zip_with(&self, rhs: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data: Vec<T> = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| v * s).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Softmax along the last axis of a matrix (max-subtracted).
    pub fn row_softmax(&self) -> Result<Self> {
        let (r, c) = self.dims2("row_softmax")?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Self::new(self.shape.clone(), out)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length = columns.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (r, c) = self.dims2("layer_norm")?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::Shape(format!(
                "layer_norm affine params {:?}/{:?} for width {c}",
                gamma.shape, beta.shape
            )));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * gamma.data[j] + beta.data[j];
            }
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn dot(&self, rhs: &Self) -> Result<T> {
        if self.numel() != rhs.numel() {
            return Err(Error::Shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(dot(&self.data, &rhs.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// Cosine of the flattened tensors. Errors on zero norm.
    pub fn cosine(&self, rhs: &Self) -> Result<T> {
        let d = self.dot(rhs)?;
        let n = self.norm() * rhs.norm();
        if n == T::zero() {
            return Err(Error::InvalidArgument("cosine of a zero vector".into()));
        }
        Ok(d / n)
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> Result<T> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Convert element type; f64 -> f32 rounds.
    pub fn cast<U: Scalar>(&self) -> Result<Tensor<U>> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        )
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean and reciprocal standard deviation (biased variance) of a row.
pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}
