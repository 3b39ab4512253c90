//! Strided GEMM over contiguous buffers, backed by `matrixmultiply`.

use super::Float;

/// Row/column strides of one matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer, seen as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = a * b + beta * c`, where `c` is row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: &[Float], la: Layout, b: &[Float], lb: Layout, c: &mut [Float], beta: Float) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert!(a.len() >= la.span() && b.len() >= lb.span(), "gemm operand out of bounds");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: every operand span was bounds-checked above, and `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        kernel(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as kernel;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as kernel;
