//! Small dense containers used by the network code.

use rand::Rng;

use crate::Scalar;

/// Row-major dense matrix.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| T::sample_symmetric(rng, scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `self · v`
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn matvec_transposed(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &g) in v.iter().enumerate() {
            if g != T::zero() {
                axpy(g, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += g ⊗ v`
    pub fn add_outer(&mut self, g: &[T], v: &[T]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr != T::zero() {
                axpy(gr, v, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sequence of column vectors stored column-major, so a window of `k`
/// consecutive columns is one contiguous slice (the concatenated window).
#[derive(Debug, Clone, PartialEq)]
pub struct Columns<T> {
    dim: usize,
    len: usize,
    data: Vec<T>,
}

impl<T: Scalar> Columns<T> {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self { dim, len, data: vec![T::zero(); dim * len] }
    }

    pub fn from_columns(dim: usize, data: Vec<T>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "column data length");
        let len = data.len() / dim;
        Self { dim, len, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn column(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenation of columns `i .. i + k`.
    pub fn window(&self, i: usize, k: usize) -> &[T] {
        &self.data[i * self.dim..(i + k) * self.dim]
    }

    pub fn window_mut(&mut self, i: usize, k: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + k) * self.dim]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[col * self.dim + row]
    }

    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[col * self.dim + row] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Appends `extra` all-zero columns.
    pub fn padded(&self, extra: usize) -> Self {
        let mut data = self.data.clone();
        data.resize(self.data.len() + extra * self.dim, T::zero());
        Self { dim: self.dim, len: self.len + extra, data }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a · x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_concatenated_columns() {
        let c = Columns::from_columns(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.window(1, 2), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.get(1, 2), 6.0);
    }

    #[test]
    fn transposed_matvec_matches_definition() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_transposed(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }
}
