use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// Matrices are rank-2 tensors `[rows, cols]`; image batches are rank-4
/// `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, values.len()], values)
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

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("{what}: expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Number of rows of a matrix (first dimension for other ranks).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a matrix (product of trailing dimensions otherwise).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Views any tensor as `[first_dim, rest]`.
    pub fn flatten_batch(self) -> Self {
        let rows = self.rows();
        let cols = self.cols();
        Self { shape: vec![rows, cols], data: self.data }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Standard product `self · other` with a fixed i-k-j accumulation order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("matmul lhs")?;
        let (n2, p) = other.dims2("matmul rhs")?;
        if n != n2 {
            return Err(Error::shape(format!("matmul: {m}x{n} · {n2}x{p}")));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, p], data: out })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, m) = self.dims2("t_matmul lhs")?;
        let (n2, p) = other.dims2("t_matmul rhs")?;
        if n != n2 {
            return Err(Error::shape(format!("t_matmul: ({n}x{m})ᵀ · {n2}x{p}")));
        }
        let mut out = vec![0.0; m * p];
        for k in 0..n {
            let brow = &other.data[k * p..(k + 1) * p];
            for i in 0..m {
                let a = self.data[k * m + i];
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * p..(i + 1) * p];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, p], data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("matmul_t lhs")?;
        let (p, n2) = other.dims2("matmul_t rhs")?;
        if n != n2 {
            return Err(Error::shape(format!("matmul_t: {m}x{n} · ({p}x{n2})ᵀ")));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a = &self.data[i * n..(i + 1) * n];
            for j in 0..p {
                let b = &other.data[j * n..(j + 1) * n];
                out[i * p + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor { shape: vec![m, p], data: out })
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("add_assign: {:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Multiplies column `j` of a matrix by `factors[j]`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Tensor> {
        let (r, c) = self.dims2("scale_columns")?;
        if factors.len() != c {
            return Err(Error::shape(format!("scale_columns: {c} columns, {} factors", factors.len())));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, f) in out[i * c..(i + 1) * c].iter_mut().zip(factors) {
                *o *= f;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Per-column Euclidean norms as a `[1, cols]` row vector.
    pub fn column_l2_norms(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("column_l2_norms")?;
        if r == 0 || c == 0 {
            return Err(Error::shape("column_l2_norms of an empty matrix"));
        }
        let mut sq = vec![0.0; c];
        for i in 0..r {
            for (s, v) in sq.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *s += v * v;
            }
        }
        Ok(Tensor { shape: vec![1, c], data: sq.into_iter().map(f64::sqrt).collect() })
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("mse: {:?} vs {:?}", self.shape, other.shape)));
        }
        if self.data.is_empty() {
            return Err(Error::Empty("mse of empty tensors".into()));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Contiguous block of leading-dimension entries `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = self.rows();
        if start > end || end > n {
            return Err(Error::shape(format!("slice_rows {start}..{end} of {n}")));
        }
        let stride = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Gathers leading-dimension entries in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let stride = self.cols();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(format!("row {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat_rows of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!("concat_rows: {:?} vs {:?}", first.shape, p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}
