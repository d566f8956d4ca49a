//! Generic float scalar for all numeric code.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! engine runs at `f32` (training) and `f64` (finite-difference oracles).

use std::fmt::{Debug, Display};

/// Floating-point scalar: `f32` or `f64`.
///
/// Adds a dense matrix-multiply entry point on top of the `num-traits`
/// bounds so hot paths can dispatch to an optimized GEMM per width.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a(m,k) . b(k,n) + beta * c`, row-major slices.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Same, but with `b` given as its transpose `bt(n,k)` row-major.
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], bt: &[Self], beta: Self, c: &mut [Self]);

    /// Same, but with `a` given as its transpose `at(k,m)` row-major.
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, at: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    fn to_f32c(self) -> f32 {
        self.to_f32().expect("scalar convertible to f32")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], bt: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(bt.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        bt.as_ptr(), 1, k as isize,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, at: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                debug_assert_eq!(at.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        at.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shorthand for typed constants inside generic code.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64c(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // transposed-b entry: bt is b stored as (n, k)
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        f64::gemm_nt(m, k, n, 1.0, &a, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // transposed-a entry: at is a stored as (k, m)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        f64::gemm_tn(m, k, n, 1.0, &at, &b, 0.0, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
