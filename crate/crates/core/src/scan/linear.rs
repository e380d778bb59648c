use super::kernel::Recurrence;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Dims {
    batch: usize,
    len: usize,
    d: usize,
    n: usize,
}

fn check_shapes<T: Element>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c: &Tensor<T>, x: &Tensor<T>) -> Result<Dims> {
    let sx = x.shape();
    if sx.len() != 3 {
        return Err(Error::dim(format!("scan input must be [B, L, D], got {sx:?}")));
    }
    let sa = a_bar.shape();
    if sa.len() != 4 || sa[..3] != sx[..] {
        return Err(Error::dim(format!("a_bar {sa:?} does not match x {sx:?}")));
    }
    if b_bar.shape() != sa {
        return Err(Error::dim(format!("b_bar {:?} vs a_bar {sa:?}", b_bar.shape())));
    }
    let n = sa[3];
    if c.shape() != [sx[0], sx[1], n] {
        return Err(Error::dim(format!("c {:?} must be [B, L, {n}]", c.shape())));
    }
    Ok(Dims {
        batch: sx[0],
        len: sx[1],
        d: sx[2],
        n,
    })
}

enum Path<'p> {
    Sequential,
    Chunked {
        chunk: usize,
        pool: Option<&'p rayon::ThreadPool>,
    },
}

fn run<T: Element>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c: &Tensor<T>, x: &Tensor<T>, path: Path<'_>) -> Result<Tensor<T>> {
    let Dims { batch, len, d, n } = check_shapes(a_bar, b_bar, c, x)?;
    let lanes = d * n;
    let mut y = vec![T::zero(); batch * len * d];
    for b in 0..batch {
        let base = b * len;
        let step = |t: usize, a: &mut [T], u: &mut [T]| {
            let off = (base + t) * lanes;
            a.copy_from_slice(&a_bar.data()[off..off + lanes]);
            let bb = &b_bar.data()[off..off + lanes];
            let xt = &x.data()[(base + t) * d..(base + t + 1) * d];
            for j in 0..d {
                for k in 0..n {
                    u[j * n + k] = bb[j * n + k] * xt[j];
                }
            }
        };
        let emit = |t: usize, h: &[T], row: &mut [T]| {
            let ct = &c.data()[(base + t) * n..(base + t + 1) * n];
            for j in 0..d {
                let mut acc = T::zero();
                for k in 0..n {
                    acc += ct[k] * h[j * n + k];
                }
                row[j] = acc;
            }
        };
        let rec = Recurrence {
            lanes,
            len,
            step: &step,
        };
        let out = &mut y[base * d..(base + len) * d];
        match path {
            Path::Sequential => rec.run_sequential(out, d, &emit),
            Path::Chunked { chunk, pool } => rec.run_chunked(chunk, pool, out, d, &emit),
        }
    }
    Tensor::new(vec![batch, len, d], y)
}

/// Sequential evaluation of `h_t = a_bar_t h_{t-1} + b_bar_t x_t`, `y_t = C_t h_t`.
///
/// Shapes: `a_bar`, `b_bar`: `[B, L, D, N]`; `c`: `[B, L, N]`; `x`: `[B, L, D]`.
/// The state starts at zero for every sequence.
pub fn scan_recurrent<T: Element>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run(a_bar, b_bar, c, x, Path::Sequential)
}

/// Same result as [`scan_recurrent`], computed as a chunked prefix scan.
///
/// Chunks of `chunk` steps are reduced and replayed independently; with a
/// pool they are spread over its workers. `chunk = 1` reproduces the
/// sequential arithmetic exactly.
pub fn scan_parallel<T: Element>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    chunk: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::Input("scan chunk must be >= 1".into()));
    }
    run(a_bar, b_bar, c, x, Path::Chunked { chunk, pool })
}

/// Thread pool with exactly `workers` threads for [`scan_parallel`].
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}
