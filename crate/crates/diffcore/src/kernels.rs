//! Strided matrix product backed by `matrixmultiply`.

/// How a row-major buffer with leading dimension `ld` is read as a matrix.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    rs: usize,
    cs: usize,
}

impl Layout {
    /// As stored.
    pub fn n(ld: usize) -> Self {
        Self { rs: ld, cs: 1 }
    }

    /// Transposed view of the stored matrix.
    pub fn t(ld: usize) -> Self {
        Self { rs: 1, cs: ld }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a @ b + beta * c` where `a` is m x k, `b` is k x n and `c` is a
/// row-major m x n block with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], ldc: usize, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= la.span(m, k), "gemm: lhs buffer too short");
    assert!(b.len() >= lb.span(k, n), "gemm: rhs buffer too short");
    assert!(c.len() >= Layout::n(ldc).span(m, n), "gemm: output buffer too short");
    if k == 0 {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
