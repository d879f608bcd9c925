//! Floating-point element types the engine is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks).
/// Besides the arithmetic bounds, each type knows its on-disk dtype code and
/// how to run a strided matrix product.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype byte in the `DPET` tensor format.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: MatMut<'_, Self>,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every supported scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("supported scalars convert to f64")
    }
}

/// Borrowed strided matrix operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view.
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer (so `cols x rows`).
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], cols: usize) -> Self {
        MatMut {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

fn check_bounds<T>(m: usize, k: usize, n: usize, a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &MatMut<'_, T>) -> bool {
    if m == 0 || n == 0 {
        return false;
    }
    let c_max = (m - 1) * c.row_stride + (n - 1) * c.col_stride;
    assert!(c_max < c.data.len(), "gemm: output operand out of bounds");
    if k == 0 {
        return true;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm: lhs operand out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm: rhs operand out of bounds");
    true
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE_CODE: u8 = $code;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: MatMut<'_, Self>,
            ) {
                if !check_bounds(m, k, n, &a, &b, &c) {
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 0, matrixmultiply::sgemm);
impl_scalar!(f64, 1, matrixmultiply::dgemm);
