use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Collapses a per-step parameter tensor to its time-invariant value.
///
/// Accepts either the invariant shape directly or a `[B, L, ..]` tensor whose
/// slices must all be identical.
fn invariant<T: Element>(t: &Tensor<T>, rank: usize, what: &str) -> Result<Vec<T>> {
    let s = t.shape();
    if s.len() == rank {
        return Ok(t.data().to_vec());
    }
    if s.len() != rank + 2 {
        return Err(Error::dim(format!("{what} has shape {s:?}")));
    }
    let width: usize = s[2..].iter().product();
    let first = &t.data()[..width];
    if t.data().chunks(width).any(|row| row != first) {
        return Err(Error::Contract(format!(
            "{what} varies over time; the convolution-kernel path is time-invariant only"
        )));
    }
    Ok(first.to_vec())
}

/// Convolution kernel `K[d, j] = sum_n C_n a_bar[d,n]^j b_bar[d,n]` for `j < len`.
pub fn lti_kernel<T: Element>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let s = a_bar.shape();
    if s.len() != 2 || b_bar.shape() != s || c.shape() != [s[1]] {
        return Err(Error::dim(format!(
            "lti_kernel: a_bar {s:?}, b_bar {:?}, c {:?}",
            b_bar.shape(),
            c.shape()
        )));
    }
    let (d, n) = (s[0], s[1]);
    let mut k = vec![T::zero(); d * len];
    for j in 0..d {
        let a = &a_bar.data()[j * n..(j + 1) * n];
        let mut pw: Vec<T> = b_bar.data()[j * n..(j + 1) * n].to_vec();
        for t in 0..len {
            let mut acc = T::zero();
            for i in 0..n {
                acc += c.data()[i] * pw[i];
                pw[i] = pw[i] * a[i];
            }
            k[j * len + t] = acc;
        }
    }
    Tensor::new(vec![d, len], k)
}

/// Causal convolution of `x: [B, L, D]` with the time-invariant SSM kernel.
///
/// `a_bar`, `b_bar` are `[D, N]` (or `[B, L, D, N]` if constant over steps);
/// `c` is `[N]` (or a constant `[B, L, N]`).
pub fn lti_kernel_apply<T: Element>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sx = x.shape();
    if sx.len() != 3 || sx[1] == 0 {
        return Err(Error::dim(format!("lti input must be [B, L>=1, D], got {sx:?}")));
    }
    let (batch, len, d) = (sx[0], sx[1], sx[2]);
    let n = *a_bar.shape().last().unwrap_or(&0);
    let a = invariant(a_bar, 2, "a_bar")?;
    let b = invariant(b_bar, 2, "b_bar")?;
    let cc = invariant(c, 1, "c")?;
    let kernel = lti_kernel(
        &Tensor::new(vec![d, n], a)?,
        &Tensor::new(vec![d, n], b)?,
        &Tensor::new(vec![n], cc)?,
        len,
    )?;
    let k = kernel.data();
    let mut y = vec![T::zero(); batch * len * d];
    for bi in 0..batch {
        let xs = &x.data()[bi * len * d..(bi + 1) * len * d];
        for t in 0..len {
            for j in 0..d {
                let mut acc = T::zero();
                for lag in 0..=t {
                    acc += k[j * len + lag] * xs[(t - lag) * d + j];
                }
                y[(bi * len + t) * d + j] = acc;
            }
        }
    }
    Tensor::new(sx.to_vec(), y)
}
