use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![x] }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += op(a) * op(b)` through a blocked GEMM; `(rows, cols, row stride,
/// col stride)` describe each operand as stored.
fn gemm_acc(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), out: &mut Matrix) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents describe views that lie inside the
    // borrowed slices, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// `out += a * b` with `a: n x k`, `b: k x m`.
pub fn matmul_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert!(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols, "matmul shape mismatch");
    gemm_acc(a.rows, a.cols, b.cols, (&a.data, a.cols as isize, 1), (&b.data, b.cols as isize, 1), out);
}

/// `out += a * b^T` with `a: n x k`, `b: m x k`.
pub fn matmul_nt_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert!(a.cols == b.cols && out.rows == a.rows && out.cols == b.rows, "matmul shape mismatch");
    gemm_acc(a.rows, a.cols, b.rows, (&a.data, a.cols as isize, 1), (&b.data, 1, b.cols as isize), out);
}

/// `out += a^T * b` with `a: n x k`, `b: n x m`.
pub fn matmul_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert!(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols, "matmul shape mismatch");
    gemm_acc(a.cols, a.rows, b.cols, (&a.data, 1, a.cols as isize), (&b.data, b.cols as isize, 1), out);
}
