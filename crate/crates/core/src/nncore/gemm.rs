//! Strided GEMM wrapper around `matrixmultiply::dgemm`.

/// Strided read-only matrix view: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = beta * c + a * b` where `a` is `m x k`, `b` is `k x n`, and `c` is an
/// `m x n` strided output with row stride `rsc` and unit column stride.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j] *= beta;
            }
        }
        return;
    }
    debug_assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    debug_assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the debug assertions above state the extents dgemm touches; every
    // caller in this crate derives strides from the owning buffer's shape.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_triple_loop_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v * v) as f64 * 0.5).collect(); // 3x2
        let want = naive(2, 3, 2, &a, &b);
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, View::rowmajor(&a, 3), View::rowmajor(&b, 2), 0.0, &mut c, 2);
        assert_eq!(c, want);

        // b stored transposed (2x3) gives the same product
        let bt = vec![b[0], b[2], b[4], b[1], b[3], b[5]];
        let mut c2 = vec![0.0; 4];
        gemm(2, 3, 2, View::rowmajor(&a, 3), View::transposed(&bt, 3), 0.0, &mut c2, 2);
        assert_eq!(c2, want);
    }
}
