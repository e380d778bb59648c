use super::Discretization;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Below this `|Δ·a|` the ZOH input factor switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Step sizes of exactly zero are clamped up to this value.
pub const DELTA_EPS: f64 = 1e-12;

/// Input factor `f` with `B̄ = f · B`, plus `∂f/∂Δ` and `∂f/∂a`.
///
/// `z = Δ·a` and `a_bar = exp(z)` are passed in so the exponential is
/// evaluated once per element by the caller.
#[inline(always)]
pub(crate) fn input_factor<T: Element>(
    kind: Discretization,
    z: T,
    a_bar: T,
    delta: T,
    a: T,
    threshold: T,
) -> (T, T, T) {
    match kind {
        Discretization::Euler => (delta, T::one(), T::zero()),
        Discretization::ZohExact => {
            let half = T::lit(0.5);
            let sixth = T::lit(1.0 / 6.0);
            if z.abs() < threshold {
                let f = delta * (T::one() + z * half + z * z * sixth);
                let df_dd = T::one() + z + z * z * half;
                let df_da = delta * delta * (half + z * T::lit(1.0 / 3.0));
                (f, df_dd, df_da)
            } else {
                let f = (a_bar - T::one()) / a;
                (f, a_bar, (delta * a_bar - f) / a)
            }
        }
    }
}

/// Value-only form of [`input_factor`], written without branches so loops over it vectorize.
#[inline(always)]
pub(crate) fn zoh_factor<T: Element>(z: T, a_bar: T, delta: T, a: T, k: &FactorConsts<T>) -> T {
    let series = delta * (k.one + z * k.half + z * z * k.sixth);
    let exact = (a_bar - k.one) / a;
    if z.abs() < k.threshold {
        series
    } else {
        exact
    }
}

/// Branch-free form of the ZOH arm of [`input_factor`].
#[inline(always)]
pub(crate) fn zoh_factor_grad<T: Element>(z: T, a_bar: T, delta: T, a: T, k: &FactorConsts<T>) -> (T, T, T) {
    let f = (a_bar - k.one) / a;
    let da = (delta * a_bar - f) / a;
    let small = z.abs() < k.threshold;
    let pick = |series: T, exact: T| if small { series } else { exact };
    (
        pick(delta * (k.one + z * k.half + z * z * k.sixth), f),
        pick(k.one + z + z * z * k.half, a_bar),
        pick(delta * delta * (k.half + z * k.third), da),
    )
}

/// Literals of [`zoh_factor`], converted once.
#[derive(Clone, Copy)]
pub(crate) struct FactorConsts<T> {
    pub one: T,
    pub half: T,
    pub sixth: T,
    pub third: T,
    pub threshold: T,
}

impl<T: Element> FactorConsts<T> {
    pub(crate) fn new(threshold: T) -> Self {
        Self {
            one: T::one(),
            half: T::lit(0.5),
            sixth: T::lit(1.0 / 6.0),
            third: T::lit(1.0 / 3.0),
            threshold,
        }
    }
}

pub(crate) fn check_a<T: Element>(a: &Tensor<T>) -> Result<()> {
    if let Some(i) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("state matrix entry {i} is not finite")));
    }
    Ok(())
}

pub(crate) fn clamp_delta<T: Element>(v: T) -> Result<T> {
    if v.is_nan() || v < T::zero() {
        return Err(Error::Input(format!("step size must be positive, got {v}")));
    }
    Ok(v.max(T::lit(DELTA_EPS)))
}

/// Zero-order-hold discretization of a diagonal continuous system.
///
/// `a: [D, N]`, `delta: [B, L, D]`, `b: [B, L, N]` give
/// `a_bar = exp(Δ·a)` and `b_bar = (exp(Δ·a) - 1) / a · b`, both `[B, L, D, N]`.
pub fn zoh_discretize<T: Element>(
    a: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    discretize_with(Discretization::ZohExact, a, delta, b, SERIES_THRESHOLD)
}

/// Discretization with an explicit rule and series threshold.
pub fn discretize_with<T: Element>(
    kind: Discretization,
    a: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
    threshold: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (sa, sd, sb) = (a.shape(), delta.shape(), b.shape());
    if sa.len() != 2 || sd.len() != 3 || sb.len() != 3 || sd[2] != sa[0] || sb[2] != sa[1] || sb[..2] != sd[..2] {
        return Err(Error::dim(format!(
            "discretize: a {sa:?}, delta {sd:?}, b {sb:?}"
        )));
    }
    check_a(a)?;
    let (d, n) = (sa[0], sa[1]);
    let steps = sd[0] * sd[1];
    let threshold = T::lit(threshold);
    let mut a_bar = vec![T::zero(); steps * d * n];
    let mut b_bar = vec![T::zero(); steps * d * n];
    for s in 0..steps {
        let row = &mut a_bar[s * d * n..(s + 1) * d * n];
        for j in 0..d {
            let dt = clamp_delta(delta.data()[s * d + j])?;
            for k in 0..n {
                row[j * n + k] = dt * a.data()[j * n + k];
            }
        }
        let z: Vec<T> = row.to_vec();
        T::exp_slice(row);
        for j in 0..d {
            let dt = clamp_delta(delta.data()[s * d + j])?;
            for k in 0..n {
                let i = j * n + k;
                let (f, _, _) = input_factor(kind, z[i], row[i], dt, a.data()[i], threshold);
                b_bar[s * d * n + i] = f * b.data()[s * n + k];
            }
        }
    }
    let shape = vec![sd[0], sd[1], d, n];
    Ok((Tensor::new(shape.clone(), a_bar)?, Tensor::new(shape, b_bar)?))
}
