use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Scalar type a [`Tensor`](crate::Tensor) can hold.
///
/// Models run on `f32`; `f64` exists so gradient checks can be run against
/// the very same code paths without single-precision rounding swamping the
/// finite-difference quotient.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
}

impl Element for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices that cover every strided index of the
        // m×k, k×n and m×n operands; checked in debug builds below.
        debug_assert!(span(m, k, rsa, csa) <= a.len());
        debug_assert!(span(k, n, rsb, csb) <= b.len());
        debug_assert!(span(m, n, rsc, csc) <= c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(x: f64) -> f32 {
        x as f32
    }
}

impl Element for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(span(m, k, rsa, csa) <= a.len());
        debug_assert!(span(k, n, rsb, csb) <= b.len());
        debug_assert!(span(m, n, rsc, csc) <= c.len());
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(x: f64) -> f64 {
        x
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}
