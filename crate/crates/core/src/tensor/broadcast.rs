use crate::error::{Error, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps each linear index of an output shape to the linear index of a
/// (possibly smaller) broadcast source.
pub(crate) struct IndexMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
    src_len: usize,
    kind: MapKind,
}

enum MapKind {
    Identity,
    /// Source equals a suffix of the output shape.
    Suffix,
    General,
}

impl IndexMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let offset = rank - src.len();
        let src_len: usize = src.iter().product();
        let mut src_strides = vec![0; rank];
        let mut stride = 1;
        for i in (0..src.len()).rev() {
            src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
            stride *= src[i];
        }
        let kind = if src == out {
            MapKind::Identity
        } else if src.len() <= out.len() && src == &out[offset..] {
            MapKind::Suffix
        } else {
            MapKind::General
        };
        Self {
            out_shape: out.to_vec(),
            src_strides,
            src_len,
            kind,
        }
    }

    pub(crate) fn indexer(&self) -> Indexer {
        match self.kind {
            MapKind::Identity => Indexer::Identity,
            MapKind::Suffix => Indexer::Modulo(self.src_len.max(1)),
            MapKind::General => {
                let mut table = Vec::with_capacity(self.out_shape.iter().product());
                self.for_each(|_, s| table.push(s));
                Indexer::Table(table)
            }
        }
    }

    /// Calls `f(out_index, src_index)` in increasing output order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.out_shape.iter().product();
        match self.kind {
            MapKind::Identity => (0..total).for_each(|i| f(i, i)),
            MapKind::Suffix => {
                let n = self.src_len.max(1);
                (0..total).for_each(|i| f(i, i % n))
            }
            MapKind::General => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let mut src = 0usize;
                for i in 0..total {
                    f(i, src);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        src += self.src_strides[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        src -= self.src_strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

/// Random-access form of an [`IndexMap`].
pub(crate) enum Indexer {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl Indexer {
    #[inline]
    pub(crate) fn at(&self, out: usize) -> usize {
        match self {
            Indexer::Identity => out,
            Indexer::Modulo(n) => out % n,
            Indexer::Table(t) => t[out],
        }
    }
}
