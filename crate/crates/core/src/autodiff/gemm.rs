/// Strided read-only view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major matrix with `cols` columns.
    pub(crate) fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: cols as isize, col_stride: 1 }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub(crate) fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols as isize }
    }
}

/// `c [m, n] = alpha * a [m, k] · b [k, n] + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; the strides describe dense m×k, k×n
    // and m×n matrices that fit inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
