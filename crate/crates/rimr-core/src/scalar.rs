//! Floating point abstraction so numeric code can run at f32 (training) or
//! f64 (gradient checking, oracles) without duplication.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Real scalar used by tensors and networks. Implemented for f32 and f64.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + PartialOrd
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Row-major matrix product `c = alpha * a @ b + beta * c` where `a` is
    /// `m x k`, `b` is `k x n` and `c` is `m x n`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert_eq!(a.len(), m * k, "gemm lhs length");
                assert_eq!(b.len(), k * n, "gemm rhs length");
                assert_eq!(c.len(), m * n, "gemm out length");
                if m == 0 || n == 0 {
                    return;
                }
                // Safety: lengths checked above, strides describe contiguous
                // row-major layout.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        n as isize,
                        1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c[m,n] = a^T @ b` where `a` is stored as `[k, m]` row-major.
pub fn gemm_tn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut at = vec![E::ZERO; m * k];
    for i in 0..k {
        for j in 0..m {
            at[j * k + i] = a[i * m + j];
        }
    }
    E::gemm(m, k, n, E::ONE, &at, b, E::ZERO, c);
}

/// `c[m,n] = a @ b^T` where `b` is stored as `[n, k]` row-major.
pub fn gemm_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    // Transpose the smaller operand; the wrapper trait is fixed row-major.
    if n * k <= m * k {
        let mut bt = vec![E::ZERO; k * n];
        for i in 0..n {
            for j in 0..k {
                bt[j * n + i] = b[i * k + j];
            }
        }
        E::gemm(m, k, n, E::ONE, a, &bt, E::ZERO, c);
    } else {
        let mut at = vec![E::ZERO; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut ct = vec![E::ZERO; n * m];
        E::gemm(n, k, m, E::ONE, b, &at, E::ZERO, &mut ct);
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = ct[j * m + i];
            }
        }
    }
}
