use super::discretize::{check_a, clamp_delta, zoh_factor, zoh_factor_grad, FactorConsts};
use super::kernel::Recurrence;
use super::{Discretization, ScanOptions, ScanPath};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Element, Tape, Tensor, Var};

struct SelectiveScan<T> {
    kind: Discretization,
    threshold: T,
    batch: usize,
    len: usize,
    d: usize,
    n: usize,
    /// hidden states after every step, `[B, L, D, N]`
    states: Vec<T>,
    /// clamped step sizes, `[B, L, D]`
    deltas: Vec<T>,
}

/// Differentiable discretize-and-scan over input-dependent parameters.
///
/// `u`, `delta`: `[B, L, D]`; `a`: `[D, N]` (negative); `b`, `c`: `[B, L, N]`.
/// Returns `y: [B, L, D]` with `y_t = C_t h_t`,
/// `h_t = exp(Δ_t a) h_{t-1} + f(Δ_t, a) B_t u_t` and `h_0 = 0`.
pub fn selective_scan<T: Element>(
    tape: &mut Tape<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    opts: &ScanOptions,
) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    if su.len() != 3 {
        return Err(Error::dim(format!("selective_scan input must be [B, L, D], got {su:?}")));
    }
    let (batch, len, d) = (su[0], su[1], su[2]);
    let sa = tape.shape(a);
    if sa.len() != 2 || sa[0] != d {
        return Err(Error::dim(format!("a {sa:?} must be [{d}, N]")));
    }
    let n = sa[1];
    if tape.shape(delta) != su.as_slice() {
        return Err(Error::dim(format!("delta {:?} vs u {su:?}", tape.shape(delta))));
    }
    for (name, v) in [("b", b), ("c", c)] {
        if tape.shape(v) != [batch, len, n] {
            return Err(Error::dim(format!("{name} {:?} must be [{batch}, {len}, {n}]", tape.shape(v))));
        }
    }
    check_a(tape.value(a))?;
    let deltas = tape
        .value(delta)
        .data()
        .iter()
        .map(|&v| clamp_delta(v))
        .collect::<Result<Vec<T>>>()?;

    let lanes = d * n;
    let threshold = T::lit(opts.series_threshold);
    let consts = FactorConsts::new(threshold);
    let kind = opts.discretization;
    let (uv, av, bv, cv) = (tape.value(u).data(), tape.value(a).data(), tape.value(b).data(), tape.value(c).data());
    let mut states = vec![T::zero(); batch * len * lanes];
    for bi in 0..batch {
        let base = bi * len;
        let step = |t: usize, abar: &mut [T], inp: &mut [T]| {
            let row = base + t;
            let dt = &deltas[row * d..(row + 1) * d];
            let ut = &uv[row * d..(row + 1) * d];
            let bt = &bv[row * n..(row + 1) * n];
            for j in 0..d {
                let (ab, aj) = (&mut abar[j * n..][..n], &av[j * n..][..n]);
                for k in 0..n {
                    ab[k] = dt[j] * aj[k];
                }
            }
            T::exp_slice(abar);
            for j in 0..d {
                let (o, ab, aj) = (&mut inp[j * n..][..n], &abar[j * n..][..n], &av[j * n..][..n]);
                let (dl, uj) = (dt[j], ut[j]);
                match kind {
                    Discretization::Euler => {
                        for k in 0..n {
                            o[k] = dl * bt[k] * uj;
                        }
                    }
                    Discretization::ZohExact => {
                        for k in 0..n {
                            o[k] = zoh_factor(dl * aj[k], ab[k], dl, aj[k], &consts) * bt[k] * uj;
                        }
                    }
                }
            }
        };
        let emit = |_: usize, h: &[T], row: &mut [T]| row.copy_from_slice(h);
        let rec = Recurrence {
            lanes,
            len,
            step: &step,
        };
        let out = &mut states[base * lanes..(base + len) * lanes];
        match opts.path {
            ScanPath::Sequential => rec.run_sequential(out, lanes, &emit),
            ScanPath::Chunked { chunk } => rec.run_chunked(chunk, None, out, lanes, &emit),
        }
    }

    let mut y = vec![T::zero(); batch * len * d];
    for ((yr, h), ct) in y.chunks_exact_mut(d).zip(states.chunks_exact(lanes)).zip(cv.chunks_exact(n)) {
        for (yj, hj) in yr.iter_mut().zip(h.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&ck, &hk) in ct.iter().zip(hj) {
                acc += ck * hk;
            }
            *yj = acc;
        }
    }
    let value = Tensor::new(su, y)?;
    let op = SelectiveScan {
        kind,
        threshold,
        batch,
        len,
        d,
        n,
        states,
        deltas,
    };
    Ok(tape.custom(&[u, delta, a, b, c], value, Box::new(op)))
}

impl<T: Element> CustomOp<T> for SelectiveScan<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, gy: &[T], inputs: &[&Tensor<T>], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (d, n, len) = (self.d, self.n, self.len);
        let lanes = d * n;
        let (u, a, b, c) = (inputs[0].data(), inputs[2].data(), inputs[3].data(), inputs[4].data());

        let mut gu = vec![T::zero(); self.batch * len * d];
        let mut gdelta = vec![T::zero(); self.batch * len * d];
        let mut ga = vec![T::zero(); lanes];
        let mut gb = vec![T::zero(); self.batch * len * n];
        let mut gc = vec![T::zero(); self.batch * len * n];

        let consts = FactorConsts::new(self.threshold);
        let zoh = matches!(self.kind, Discretization::ZohExact);
        let mut gh = vec![T::zero(); lanes];
        let mut abar = vec![T::zero(); lanes];
        let zeros = vec![T::zero(); lanes];
        let (mut tx, mut td) = (vec![T::zero(); n], vec![T::zero(); n]);
        for bi in 0..self.batch {
            gh.fill(T::zero());
            for t in (0..len).rev() {
                let row = bi * len + t;
                let dt = &self.deltas[row * d..(row + 1) * d];
                let h = &self.states[row * lanes..(row + 1) * lanes];
                let hprev = if t == 0 {
                    &zeros[..]
                } else {
                    &self.states[(row - 1) * lanes..row * lanes]
                };
                let (xt, gyt) = (&u[row * d..(row + 1) * d], &gy[row * d..(row + 1) * d]);
                let (bt, ct) = (&b[row * n..][..n], &c[row * n..][..n]);
                let gct = &mut gc[row * n..][..n];
                let gbt = &mut gb[row * n..][..n];
                for j in 0..d {
                    let (ab, aj) = (&mut abar[j * n..][..n], &a[j * n..][..n]);
                    for k in 0..n {
                        ab[k] = dt[j] * aj[k];
                    }
                }
                T::exp_slice(&mut abar);

                for j in 0..d {
                    let (dl, xj, gyj) = (dt[j], xt[j], gyt[j]);
                    let g = &mut gh[j * n..][..n];
                    let gaj = &mut ga[j * n..][..n];
                    let (hj, hp, ab, aj) = (&h[j * n..][..n], &hprev[j * n..][..n], &abar[j * n..][..n], &a[j * n..][..n]);
                    lane_backward(zoh, &consts, (dl, xj, gyj), g, gaj, gct, gbt, &mut tx, &mut td, [hj, hp, ab, aj, bt, ct]);
                    let (mut sx, mut sd) = (T::zero(), T::zero());
                    for (&x, &y) in tx.iter().zip(&td) {
                        sx += x;
                        sd += y;
                    }
                    gu[row * d + j] = sx;
                    // clamped entries pass the gradient straight through
                    gdelta[row * d + j] = sd;
                }
            }
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc)]
    }
}

/// Gradient of one `(batch, step, channel)` row over the `N` state lanes.
///
/// Kept as a separate function so the output slices are known not to alias.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn lane_backward<T: Element>(
    zoh: bool,
    consts: &FactorConsts<T>,
    (dl, xj, gyj): (T, T, T),
    g: &mut [T],
    ga: &mut [T],
    gc: &mut [T],
    gb: &mut [T],
    tx: &mut [T],
    td: &mut [T],
    [h, hp, ab, a, b, c]: [&[T]; 6],
) {
    let n = g.len();
    let (ga, gc, gb, tx, td) = (&mut ga[..n], &mut gc[..n], &mut gb[..n], &mut tx[..n], &mut td[..n]);
    let (h, hp, ab, a, b, c) = (&h[..n], &hp[..n], &ab[..n], &a[..n], &b[..n], &c[..n]);
    for k in 0..n {
        g[k] += gyj * c[k];
        gc[k] += gyj * h[k];
        let (f, df_dd, df_da) = if zoh {
            zoh_factor_grad(dl * a[k], ab[k], dl, a[k], consts)
        } else {
            (dl, consts.one, T::zero())
        };
        let gf = g[k] * f;
        tx[k] = gf * b[k];
        gb[k] += gf * xj;
        let g_f = g[k] * b[k] * xj;
        let g_abar = g[k] * hp[k];
        td[k] = g_abar * a[k] * ab[k] + g_f * df_dd;
        ga[k] += g_abar * dl * ab[k] + g_f * df_da;
        g[k] *= ab[k];
    }
}
