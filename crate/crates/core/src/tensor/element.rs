use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Storage dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point scalar usable as tensor storage.
///
/// Implemented for `f32` (training) and `f64` (gradient checks). The
/// associated kernels are the two hot paths of the model: dense GEMM and
/// the slice exponential used by the scan discretization and activations.
pub trait Element:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    /// In-place elementwise `exp`.
    fn exp_slice(xs: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: &[T], sa: (isize, isize), b: &[T], sb: (isize, isize), c: &[T]) {
    let span = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, sa), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, sb), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: bounds verified above; c is row-major contiguous m x n.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn exp_slice(xs: &mut [f32]) {
        for x in xs.iter_mut() {
            *x = fast_exp_f32(*x);
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: bounds verified above; c is row-major contiguous m x n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn exp_slice(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }
}

/// Branch-free `expf` (Cephes polynomial) that the compiler can vectorize.
///
/// Inputs below about -87.3 saturate to the smallest normal float instead of
/// flushing to zero; NaN propagates.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits
    const ROUND: f32 = 12_582_912.0;
    let nan = x.is_nan();
    let x = x.clamp(-87.336_54, 88.722_83);
    let shifted = x * LOG2E + ROUND;
    let fx = shifted - ROUND;
    let n = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - fx * LN2_HI - fx * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n + 127) as u32) << 23);
    if nan {
        f32::NAN
    } else {
        y * scale
    }
}
