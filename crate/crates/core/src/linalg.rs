//! Strided GEMM kernels used by the autograd tape.

/// Strided view into a flat buffer: element (i, j) lives at `off + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        Self {
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self {
            off: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, off: usize) -> Self {
        Self { off, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.off
        } else {
            self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `C <- alpha * A·B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.off + i * cv.rs + j * cv.cs;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: B out of bounds");
    // SAFETY: every element touched lies within the bounds asserted above and
    // `c` cannot alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major `A·B`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::row_major(k),
        b,
        View::row_major(n),
        0.0,
        &mut out,
        View::row_major(n),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_transpose_product() {
        // A = [[1,2],[3,4]], B^T via strides.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        gemm(
            2,
            2,
            2,
            1.0,
            &a,
            View::row_major(2),
            &b,
            View::transposed(2),
            0.0,
            &mut c,
            View::row_major(2),
        );
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn zero_inner_dim_clears_output() {
        let mut c = vec![3.0; 4];
        gemm(
            2,
            0,
            2,
            1.0,
            &[],
            View::row_major(0),
            &[],
            View::row_major(2),
            0.0,
            &mut c,
            View::row_major(2),
        );
        assert_eq!(c, vec![0.0; 4]);
    }
}
