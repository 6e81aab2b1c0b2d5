use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// A strided row-major matrix view used by [`Element::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a contiguous row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows as isize - 1) * self.row_stride + (cols as isize - 1) * self.col_stride;
        assert!(
            self.row_stride >= 0 && self.col_stride >= 0 && (last as usize) < self.data.len(),
            "matrix view out of bounds"
        );
    }
}

/// Floating point scalar the engine computes in.
///
/// `f64` is used for gradient checks and oracles, `f32` for training.
pub trait Element:
    Float + FromPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a[m,k] * b[k,n] + beta * c`, with `c` contiguous row-major `[m, n]`.
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                a.check(m, k);
                b.check(k, n);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view has been bounds-checked for its logical
                // extent and `c` does not alias `a` or `b` (it is `&mut`).
                unsafe {
                    $kernel(
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
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Safe entry point for matrix products.
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    T::gemm_raw(m, k, n, T::one(), a, b, beta, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, MatRef::rows(&a, 3), MatRef::rows(&b, 2), 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a^T (3x2) * a (2x3)... use the transposed view of a as [3,2]
        let mut d = [0.0f64; 9];
        gemm(3, 2, 3, MatRef::transposed(&a, 3), MatRef::rows(&a, 3), 0.0, &mut d);
        assert_eq!(d[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0);
    }
}
