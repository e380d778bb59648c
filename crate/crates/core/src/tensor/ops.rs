use super::broadcast::{broadcast_shape, IndexMap};
use super::tape::{Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid_vec<T: Element>(x: &[T]) -> Vec<T> {
    let mut e: Vec<T> = x.iter().map(|&v| -v).collect();
    T::exp_slice(&mut e);
    e.iter_mut().for_each(|v| *v = T::one() / (T::one() + *v));
    e
}

pub(crate) fn softplus_vec<T: Element>(x: &[T]) -> Vec<T> {
    let mut e: Vec<T> = x.iter().map(|&v| -v.abs()).collect();
    T::exp_slice(&mut e);
    x.iter()
        .zip(e)
        .map(|(&v, e)| v.max(T::zero()) + e.ln_1p())
        .collect()
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let ia = IndexMap::new(ta.shape(), &shape).indexer();
        let ib = IndexMap::new(tb.shape(), &shape).indexer();
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = if da.len() == n && db.len() == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|o| f(da[ia.at(o)], db[ib.at(o)])).collect()
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        Ok(self.push(Tensor::new(shape, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        T::exp_slice(v.data_mut());
        self.push(v, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), softplus_vec(t.data())).expect("same shape");
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), sigmoid_vec(t.data())).expect("same shape");
        self.push(v, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = sigmoid_vec(t.data());
        let data = t.data().iter().zip(s).map(|(&x, s)| x * s).collect();
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Silu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_usize(t.numel().max(1)).unwrap();
        let s = t.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() || t.shape()[axis] == 0 {
            return Err(Error::dim(format!("mean over axis {axis} of {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MeanAxis { x: a, axis }))
    }

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![T::zero(); rows * p];
            T::gemm(rows, k, p, T::one(), ta.data(), (k as isize, 1), tb.data(), (p as isize, 1), T::zero(), &mut out);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = p;
            let v = Tensor::new(shape, out)?;
            return Ok(self.push(v, Op::MatMul(a, b)));
        }
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let ia = IndexMap::new(&sa[..sa.len() - 2], &batch).indexer();
        let ib = IndexMap::new(&sb[..sb.len() - 2], &batch).indexer();
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * m * p];
        for i in 0..nb {
            let ao = ia.at(i) * m * k;
            let bo = ib.at(i) * k * p;
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &ta.data()[ao..ao + m * k],
                (k as isize, 1),
                &tb.data()[bo..bo + k * p],
                (p as isize, 1),
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let mut shape = batch;
        shape.extend([m, p]);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.shape().is_empty() || d == 0 {
            return Err(Error::dim("layer_norm over an empty last dimension"));
        }
        if eps <= 0.0 {
            return Err(Error::Input(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine shapes {:?}/{:?} vs last dim {d}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / d;
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Causal depthwise convolution along the sequence axis of `[B, L, D]`
    /// with weights `[D, k]`; the input is left-padded with `k - 1` zeros.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || sw[1] == 0 {
            return Err(Error::dim(format!("depthwise_conv1d: x {sx:?}, w {sw:?}")));
        }
        let (b, l, d, k) = (sx[0], sx[1], sx[2], sw[1]);
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            for t in 0..l {
                let dst = &mut out[(bi * l + t) * d..(bi * l + t + 1) * d];
                for j in 0..k {
                    let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                    let src = &xd[(bi * l + src_t) * d..(bi * l + src_t + 1) * d];
                    for c in 0..d {
                        dst[c] += wd[c * k + j] * src[c];
                    }
                }
            }
        }
        let v = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(v, Op::Conv1d { x, w }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `out[b, i, ..] = x[b, perm[i], ..]` along axis 1.
    pub fn permute_seq(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(Error::dim(format!("permute_seq needs rank >= 2, got {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), 1);
        if let Some(&bad) = perm.iter().find(|&&p| p >= n) {
            return Err(Error::dim(format!("permute_seq index {bad} >= length {n}")));
        }
        let mut out = Vec::with_capacity(outer * perm.len() * inner);
        for o in 0..outer {
            for &p in perm {
                out.extend_from_slice(&t.data()[(o * n + p) * inner..(o * n + p + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[1] = perm.len();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::PermuteSeq { x, perm: perm.to_vec() }))
    }

    /// Row lookup into a `[R, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim(format!("gather_rows needs a 2-D table, got {:?}", t.shape())));
        }
        let (r, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("gather_rows index {i} >= {r} rows")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(v, Op::GatherRows { table, idx: idx.to_vec() }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || start + len > t.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow axis {axis} [{start}, {}) of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::dim(format!("mse shapes {:?} vs {:?}", tp.shape(), tt.shape())));
        }
        let n = T::from_usize(tp.numel().max(1)).unwrap();
        let s = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target }))
    }

    /// Mean negative log-softmax of `logits [B, C]` at `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * c..(i + 1) * c];
            p.iter_mut().zip(row).for_each(|(p, &v)| *p = v - max);
            T::exp_slice(p);
            let z: T = p.iter().copied().sum();
            p.iter_mut().for_each(|v| *v /= z);
            total += z.ln() + max - row[labels[i]];
        }
        let loss = total / T::from_usize(b.max(1)).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

fn reduce_broadcast<T: Element>(g: &[T], src_shape: &[usize], out_shape: &[usize], f: impl Fn(usize) -> T) -> Vec<T> {
    let n: usize = src_shape.iter().product();
    if n == g.len() {
        return (0..n).map(&f).collect();
    }
    let idx = IndexMap::new(src_shape, out_shape).indexer();
    let mut acc = vec![T::zero(); n];
    for o in 0..g.len() {
        acc[idx.at(o)] += f(o);
    }
    acc
}

/// Input gradients of node `i` given its upstream gradient `g`.
pub(crate) fn backward_op<T: Element>(tape: &Tape<T>, i: usize, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
    let node = &tape.nodes[i];
    let out = &node.value;
    let val = |v: &Var| &tape.nodes[v.0].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let shape = out.shape();
            let ia = IndexMap::new(ta.shape(), shape).indexer();
            let ib = IndexMap::new(tb.shape(), shape).indexer();
            let ga = needs[0].then(|| match node.op {
                Op::Mul(..) => reduce_broadcast(g, ta.shape(), shape, |o| g[o] * tb.data()[ib.at(o)]),
                _ => reduce_broadcast(g, ta.shape(), shape, |o| g[o]),
            });
            let gb = needs[1].then(|| match node.op {
                Op::Mul(..) => reduce_broadcast(g, tb.shape(), shape, |o| g[o] * ta.data()[ia.at(o)]),
                Op::Sub(..) => reduce_broadcast(g, tb.shape(), shape, |o| -g[o]),
                _ => reduce_broadcast(g, tb.shape(), shape, |o| g[o]),
            });
            vec![ga, gb]
        }
        Op::Neg(_) => vec![Some(g.iter().map(|&v| -v).collect())],
        Op::Scale(_, s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
        Op::Exp(_) => vec![Some(g.iter().zip(out.data()).map(|(&g, &y)| g * y).collect())],
        Op::Softplus(a) | Op::Sigmoid(a) | Op::Silu(a) => {
            let x = val(a).data();
            let s = sigmoid_vec(x);
            let one = T::one();
            let grad = match node.op {
                Op::Softplus(_) => g.iter().zip(&s).map(|(&g, &s)| g * s).collect(),
                Op::Sigmoid(_) => g.iter().zip(&s).map(|(&g, &s)| g * s * (one - s)).collect(),
                _ => g
                    .iter()
                    .zip(&s)
                    .zip(x)
                    .map(|((&g, &s), &x)| g * s * (one + x * (one - s)))
                    .collect(),
            };
            vec![Some(grad)]
        }
        Op::Sum(a) => vec![Some(vec![g[0]; val(a).numel()])],
        Op::Mean(a) => {
            let n = val(a).numel();
            vec![Some(vec![g[0] / T::from_usize(n.max(1)).unwrap(); n])]
        }
        Op::MeanAxis { x, axis } => {
            let tx = val(x);
            let (outer, n, inner) = split_axis(tx.shape(), *axis);
            let inv = T::one() / T::from_usize(n).unwrap();
            let mut gx = vec![T::zero(); tx.numel()];
            for o in 0..outer {
                for j in 0..n {
                    let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, &v)| *d = v * inv);
                }
            }
            vec![Some(gx)]
        }
        Op::MatMul(a, b) => matmul_backward(val(a), val(b), g, needs),
        Op::LayerNorm {
            gamma, xhat, rstd, ..
        } => {
            let tg = val(gamma).data();
            let d = tg.len();
            let rows = xhat.len() / d;
            let inv_d = T::one() / T::from_usize(d).unwrap();
            let mut gx = needs[0].then(|| vec![T::zero(); xhat.len()]);
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                    dxhat[j] = gr[j] * tg[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
            vec![gx, Some(gg), Some(gb)]
        }
        Op::Conv1d { x, w } => {
            let (tx, tw) = (val(x), val(w));
            let (b, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let k = tw.shape()[1];
            let (xd, wd) = (tx.data(), tw.data());
            let mut gx = vec![T::zero(); tx.numel()];
            let mut gw = vec![T::zero(); tw.numel()];
            for bi in 0..b {
                for t in 0..l {
                    let go = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                    for j in 0..k {
                        let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                        let base = (bi * l + src_t) * d;
                        for c in 0..d {
                            gx[base + c] += go[c] * wd[c * k + j];
                            gw[c * k + j] += go[c] * xd[base + c];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::PermuteSeq { x, perm } => {
            let tx = val(x);
            let (outer, n, inner) = split_axis(tx.shape(), 1);
            let mut gx = vec![T::zero(); tx.numel()];
            for o in 0..outer {
                for (i, &p) in perm.iter().enumerate() {
                    let src = &g[(o * perm.len() + i) * inner..(o * perm.len() + i + 1) * inner];
                    let dst = &mut gx[(o * n + p) * inner..(o * n + p + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            vec![Some(gx)]
        }
        Op::GatherRows { table, idx } => {
            let tt = val(table);
            let d = tt.shape()[1];
            let mut gt = vec![T::zero(); tt.numel()];
            for (r, &i) in idx.iter().enumerate() {
                gt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(gt)]
        }
        Op::Narrow { x, axis, start } => {
            let tx = val(x);
            let (outer, n, inner) = split_axis(tx.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![T::zero(); tx.numel()];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Mse { pred, target } => {
            let (tp, tt) = (val(pred), val(target));
            let c = T::lit(2.0) * g[0] / T::from_usize(tp.numel().max(1)).unwrap();
            let gp: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&p, &t)| c * (p - t)).collect();
            let gt = needs[1].then(|| gp.iter().map(|&v| -v).collect());
            vec![Some(gp), gt]
        }
        Op::CrossEntropy { labels, probs, .. } => {
            let b = labels.len();
            let c = probs.len() / b.max(1);
            let scale = g[0] / T::from_usize(b.max(1)).unwrap();
            let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                gl[i * c + l] -= scale;
            }
            vec![Some(gl)]
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
            op.backward(g, &vals, needs)
        }
    }
}

fn matmul_backward<T: Element>(ta: &Tensor<T>, tb: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
    let (sa, sb) = (ta.shape(), tb.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let p = sb[sb.len() - 1];
    if sb.len() == 2 {
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let ga = needs[0].then(|| {
            let mut ga = vec![T::zero(); rows * k];
            // g [rows, p] . b^T [p, k]
            T::gemm(rows, p, k, T::one(), g, (p as isize, 1), tb.data(), (1, p as isize), T::zero(), &mut ga);
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![T::zero(); k * p];
            // a^T [k, rows] . g [rows, p]
            T::gemm(k, rows, p, T::one(), ta.data(), (1, k as isize), g, (p as isize, 1), T::zero(), &mut gb);
            gb
        });
        return vec![ga, gb];
    }
    let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("checked in forward");
    let ia = IndexMap::new(&sa[..sa.len() - 2], &batch).indexer();
    let ib = IndexMap::new(&sb[..sb.len() - 2], &batch).indexer();
    let nb: usize = batch.iter().product();
    let mut ga = needs[0].then(|| vec![T::zero(); ta.numel()]);
    let mut gb = needs[1].then(|| vec![T::zero(); tb.numel()]);
    for i in 0..nb {
        let ao = ia.at(i) * m * k;
        let bo = ib.at(i) * k * p;
        let gi = &g[i * m * p..(i + 1) * m * p];
        if let Some(ga) = ga.as_mut() {
            T::gemm(
                m,
                p,
                k,
                T::one(),
                gi,
                (p as isize, 1),
                &tb.data()[bo..bo + k * p],
                (1, p as isize),
                T::one(),
                &mut ga[ao..ao + m * k],
            );
        }
        if let Some(gb) = gb.as_mut() {
            T::gemm(
                k,
                m,
                p,
                T::one(),
                &ta.data()[ao..ao + m * k],
                (1, k as isize),
                gi,
                (p as isize, 1),
                T::one(),
                &mut gb[bo..bo + k * p],
            );
        }
    }
    vec![ga, gb]
}
