//! Dense kernels shared by the model, merging and theory code.
//!
//! Every reduction walks its operands in a fixed order with plain
//! multiply-then-add steps, so a kernel called twice on the same input
//! returns bit-identical output.

use num_traits::Float;

use crate::error::{AtmError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Matrix64 = Matrix<f64>;

impl<T: Float> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AtmError::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(AtmError::Shape(format!("row {i} has {} columns, expected {cols}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(AtmError::Shape(format!("bias of length {} for {} columns", bias.len(), self.cols)));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AtmError::Shape(format!("cannot add {:?} to {:?}", other.shape(), self.shape())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// Matrix product `a · b`.
///
/// Rows are processed four at a time so each row of `b` is reused from
/// cache, but every output element still accumulates `a[i][k] * b[k][j]`
/// for ascending `k` starting from zero, exactly like the textbook triple
/// loop.
pub fn matmul<T: Float>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(AtmError::Shape(format!("matmul of {:?} by {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    if k == 0 {
        return Ok(out);
    }

    const BLOCK: usize = 4;
    for (a_blk, out_blk) in a.data.chunks(BLOCK * k).zip(out.data.chunks_mut(BLOCK * n)) {
        let rows_in_blk = a_blk.len() / k;
        for kk in 0..k {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for r in 0..rows_in_blk {
                let aik = a_blk[r * k + kk];
                let out_row = &mut out_blk[r * n..(r + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aik * bv;
                }
            }
        }
    }
    Ok(out)
}

/// `x · w + bias`, the affine map used by every projection in the model.
pub fn linear<T: Float>(x: &Matrix<T>, w: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    let mut out = matmul(x, w)?;
    out.add_row_vector(bias)?;
    Ok(out)
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    // f64 accumulator keeps the row sum within a few ulps of 1 for f32 rows.
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.to_f64().unwrap();
    }
    let sum = T::from(sum).unwrap();
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_rows<T: Float>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn layer_norm<T: Float>(m: &Matrix<T>, gamma: &[T], beta_shift: &[T], eps: T) -> Result<Matrix<T>> {
    if gamma.len() != m.cols || beta_shift.len() != m.cols {
        return Err(AtmError::Shape(format!(
            "layer norm affine of length {}/{} for {} columns",
            gamma.len(),
            beta_shift.len(),
            m.cols
        )));
    }
    let mut out = m.clone();
    if m.cols == 0 {
        return Ok(out);
    }
    let n = T::from(m.cols).unwrap();
    for row in out.data.chunks_exact_mut(m.cols) {
        let mut sum = T::zero();
        for &v in row.iter() {
            sum = sum + v;
        }
        let mean = sum / n;
        let mut sq = T::zero();
        for &v in row.iter() {
            let d = v - mean;
            sq = sq + d * d;
        }
        let inv_std = T::one() / (sq / n + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta_shift) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation.
pub fn gelu<T: Float>(x: T) -> T {
    let half = T::from(0.5).unwrap();
    let c = T::from(0.797_884_560_802_865_4).unwrap(); // sqrt(2/pi)
    let k = T::from(0.044_715).unwrap();
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_in_place<T: Float>(m: &mut Matrix<T>) {
    for v in m.data.iter_mut() {
        *v = gelu(*v);
    }
}

pub fn dot<T: Float>(u: &[T], v: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        acc = acc + a * b;
    }
    acc
}

pub fn l2_norm<T: Float>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Float>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(AtmError::Shape(format!("cosine of vectors with lengths {} and {}", u.len(), v.len())));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(AtmError::DegenerateInput("cosine similarity of a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Indices that sort `keys` ascending; equal keys keep their original order.
pub fn argsort_stable<K: Ord>(keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    idx
}
