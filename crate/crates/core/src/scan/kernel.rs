//! First-order linear recurrence `h_t = a_t * h_{t-1} + u_t` over many
//! independent lanes, evaluated sequentially or as a chunked prefix scan.
//!
//! The chunked form uses the associative combine
//! `(a1, u1) . (a2, u2) = (a1 * a2, a2 * u1 + u2)`:
//! an up-sweep reduces every chunk to one `(prod a, local h)` pair, the
//! carries are propagated across chunks in order, and a down-sweep replays
//! each chunk from its incoming carry. Chunks are independent in both
//! sweeps, so they can run on separate workers; each chunk's output is
//! computed by exactly one worker, which keeps results independent of the
//! worker count.

use rayon::prelude::*;

use crate::tensor::Element;

/// Produces the coefficients of step `t`: fills `a` and `u` (one entry per lane).
pub(crate) type StepFn<'a, T> = dyn Fn(usize, &mut [T], &mut [T]) + Sync + 'a;

/// Consumes the state after step `t` and writes that step's output row.
pub(crate) type EmitFn<'a, T> = dyn Fn(usize, &[T], &mut [T]) + Sync + 'a;

pub(crate) struct Recurrence<'a, T> {
    pub lanes: usize,
    pub len: usize,
    pub step: &'a StepFn<'a, T>,
}

impl<T: Element> Recurrence<'_, T> {
    /// Sequential evaluation from `h_0 = 0`; `out` holds `len` rows of `width`.
    pub(crate) fn run_sequential(&self, out: &mut [T], width: usize, emit: &EmitFn<'_, T>) {
        let mut h = vec![T::zero(); self.lanes];
        let mut a = vec![T::zero(); self.lanes];
        let mut u = vec![T::zero(); self.lanes];
        for t in 0..self.len {
            (self.step)(t, &mut a, &mut u);
            for ((h, &a), &u) in h.iter_mut().zip(&a).zip(&u) {
                *h = a * *h + u;
            }
            emit(t, &h, &mut out[t * width..(t + 1) * width]);
        }
    }

    /// Chunked up-sweep / carry / down-sweep evaluation.
    ///
    /// With `pool = None` the chunks run in order on the calling thread.
    pub(crate) fn run_chunked(
        &self,
        chunk: usize,
        pool: Option<&rayon::ThreadPool>,
        out: &mut [T],
        width: usize,
        emit: &EmitFn<'_, T>,
    ) {
        let chunk = chunk.max(1);
        let n_chunks = self.len.div_ceil(chunk);
        if n_chunks <= 1 {
            return self.run_sequential(out, width, emit);
        }
        let lanes = self.lanes;

        // up-sweep: (prod a, h from zero) per chunk; the last chunk is never needed
        let reduce = |c: usize| -> (Vec<T>, Vec<T>) {
            let mut prod = vec![T::one(); lanes];
            let mut h = vec![T::zero(); lanes];
            let mut a = vec![T::zero(); lanes];
            let mut u = vec![T::zero(); lanes];
            for t in c * chunk..((c + 1) * chunk).min(self.len) {
                (self.step)(t, &mut a, &mut u);
                for l in 0..lanes {
                    h[l] = a[l] * h[l] + u[l];
                    prod[l] = a[l] * prod[l];
                }
            }
            (prod, h)
        };
        let summaries: Vec<(Vec<T>, Vec<T>)> = match pool {
            Some(pool) => pool.install(|| (0..n_chunks - 1).into_par_iter().map(reduce).collect()),
            None => (0..n_chunks - 1).map(reduce).collect(),
        };

        // carry into chunk c+1 = prod_c * carry_c + h_c
        let mut carries = Vec::with_capacity(n_chunks);
        carries.push(vec![T::zero(); lanes]);
        for (prod, h) in &summaries {
            let prev = carries.last().unwrap();
            let next: Vec<T> = (0..lanes).map(|l| prod[l] * prev[l] + h[l]).collect();
            carries.push(next);
        }

        // down-sweep: replay each chunk from its carry
        let replay = |(c, rows): (usize, &mut [T])| {
            let mut h = carries[c].clone();
            let mut a = vec![T::zero(); lanes];
            let mut u = vec![T::zero(); lanes];
            let start = c * chunk;
            for t in start..((c + 1) * chunk).min(self.len) {
                (self.step)(t, &mut a, &mut u);
                for ((h, &a), &u) in h.iter_mut().zip(&a).zip(&u) {
                    *h = a * *h + u;
                }
                let r = t - start;
                emit(t, &h, &mut rows[r * width..(r + 1) * width]);
            }
        };
        let out = &mut out[..self.len * width];
        match pool {
            Some(pool) => pool.install(|| out.par_chunks_mut(chunk * width).enumerate().for_each(replay)),
            None => out.chunks_mut(chunk * width).enumerate().for_each(replay),
        }
    }
}
