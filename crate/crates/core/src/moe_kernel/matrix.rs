use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, Range};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of the kernel: `f32` or `f64`.
pub trait Scalar: Float + AddAssign + Debug + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { what: "matrix data", expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Stack matrices with equal column counts.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape { what: "concat columns", expected: cols, found: p.cols });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows: data.len() / cols.max(1), cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }
}

/// `out[j] = Σ_k x[k] · w[k][j]`, summed in ascending `k`.
pub(crate) fn vec_mat<T: Scalar>(x: &[T], w: &Matrix<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(T::zero());
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wkj) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wkj;
        }
    }
}

/// `out[k] = Σ_j d[j] · w[k][j]`, i.e. `d · wᵀ`.
pub(crate) fn vec_mat_t<T: Scalar>(d: &[T], w: &Matrix<T>, out: &mut [T]) {
    debug_assert_eq!(d.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (&dj, &wkj) in d.iter().zip(w.row(k)) {
            acc += dj * wkj;
        }
        *o = acc;
    }
}

/// `g[k][j] += x[k] · d[j]`.
pub(crate) fn outer_acc<T: Scalar>(x: &[T], d: &[T], g: &mut Matrix<T>) {
    for (k, &xk) in x.iter().enumerate() {
        for (gkj, &dj) in g.row_mut(k).iter_mut().zip(d) {
            *gkj += xk * dj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mat_and_transpose() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = [0.0; 3];
        vec_mat(&[1.0, -1.0], &w, &mut out);
        assert_eq!(out, [-3.0, -3.0, -3.0]);
        let mut back = [0.0; 2];
        vec_mat_t(&[1.0, 0.0, 1.0], &w, &mut back);
        assert_eq!(back, [4.0, 10.0]);
    }

    #[test]
    fn slicing_and_concat() {
        let m = Matrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
        let parts = [m.slice_rows(0..2), m.slice_rows(2..2), m.slice_rows(2..5)];
        assert_eq!(parts[1].rows(), 0);
        assert_eq!(Matrix::concat_rows(&parts).unwrap(), m);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Matrix::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
