//! Floating-point element types the library is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of every [`Tensor`](crate::Tensor).
///
/// Besides the usual float arithmetic, a scalar knows how to run a strided
/// general matrix multiply, so the hot loops can hand off to an optimized
/// kernel for the concrete type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in checkpoints ("f32", "f64").
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand of {len} elements too short for {rows}x{cols} view");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, "f64", matrixmultiply::dgemm);
impl_scalar!(f32, "f32", matrixmultiply::sgemm);
