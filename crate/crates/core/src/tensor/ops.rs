use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// Trailing-dimension aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if src == out {
        return (0..numel).collect();
    }
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + n - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut idx = Vec::with_capacity(numel);
    let mut counter = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..numel {
        idx.push(off);
        for d in (0..n).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out[d] {
                break;
            }
            off -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn scatter_reduce(grad: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, &i) in grad.iter().zip(idx) {
        out[i] += g;
    }
    out
}

/// Reference triple-loop product of row-major `m×k` and `k×n` matrices.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

// c[m,n] += a[m,k] @ b[k,n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,k] += g[m,n] @ b[k,n]^T
fn mm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += s;
        }
    }
}

// c[k,n] += a[m,k]^T @ g[m,n]
fn mm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

impl Tensor {
    fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>, Vec<usize>)> {
        let shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let ia = broadcast_index(self.shape(), &shape);
        let ib = broadcast_index(other.shape(), &shape);
        let (a, b) = (self.data(), other.data());
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(a[i], b[j])).collect();
        Ok((data, shape, ia, ib))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape, ia, ib) = self.zip_broadcast(other, "add", |x, y| x + y)?;
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| scatter_reduce(ctx.grad_out, &ia, na)),
                    ctx.needs[1].then(|| scatter_reduce(ctx.grad_out, &ib, nb)),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape, ia, ib) = self.zip_broadcast(other, "sub", |x, y| x - y)?;
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| scatter_reduce(ctx.grad_out, &ia, na)),
                    ctx.needs[1].then(|| {
                        let mut g = scatter_reduce(ctx.grad_out, &ib, nb);
                        g.iter_mut().for_each(|v| *v = -*v);
                        g
                    }),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape, ia, ib) = self.zip_broadcast(other, "mul", |x, y| x * y)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (ad, bd) = (a.data(), b.data());
                vec![
                    ctx.needs[0].then(|| {
                        let mut g = vec![0.0; ad.len()];
                        for ((go, &i), &j) in ctx.grad_out.iter().zip(&ia).zip(&ib) {
                            g[i] += go * bd[j];
                        }
                        g
                    }),
                    ctx.needs[1].then(|| {
                        let mut g = vec![0.0; bd.len()];
                        for ((go, &i), &j) in ctx.grad_out.iter().zip(&ia).zip(&ib) {
                            g[j] += go * ad[i];
                        }
                        g
                    }),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape, ia, ib) = self.zip_broadcast(other, "div", |x, y| x / y)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (ad, bd) = (a.data(), b.data());
                vec![
                    ctx.needs[0].then(|| {
                        let mut g = vec![0.0; ad.len()];
                        for ((go, &i), &j) in ctx.grad_out.iter().zip(&ia).zip(&ib) {
                            g[i] += go / bd[j];
                        }
                        g
                    }),
                    ctx.needs[1].then(|| {
                        let mut g = vec![0.0; bd.len()];
                        for ((go, &i), &j) in ctx.grad_out.iter().zip(&ia).zip(&ib) {
                            g[j] -= go * ad[i] / (bd[j] * bd[j]);
                        }
                        g
                    }),
                ]
            }),
        ))
    }

    /// Elementwise map with derivative `df(x, y)` expressed through the
    /// input `x` and output `y`.
    pub fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let g = input
                    .data()
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad_out)
                    .map(|((&x, &y), &go)| go * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().sum()],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad_out[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    fn outer_inner(&self, axis: usize) -> (usize, usize, usize) {
        let s = self.shape();
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        (outer, s[axis], inner)
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Tensor {
        let ax = self.axis(axis);
        let (outer, len, inner) = self.outer_inner(ax);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        g[base..base + inner]
                            .copy_from_slice(&ctx.grad_out[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Tensor {
        let len = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).unary(move |x| x / len, move |_, _| 1.0 / len)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let ia = broadcast_index(ba, &batch);
        let ib = broadcast_index(bb, &batch);
        let nbatch = ia.len();
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; nbatch * m * n];
        for bi in 0..nbatch {
            mm_acc(
                &a[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                &b[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ta.data(), tb.data());
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![0.0; a.len()];
                    for bi in 0..nbatch {
                        mm_nt_acc(
                            &ctx.grad_out[bi * m * n..(bi + 1) * m * n],
                            &b[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                            &mut g[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![0.0; b.len()];
                    for bi in 0..nbatch {
                        mm_tn_acc(
                            &a[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                            &ctx.grad_out[bi * m * n..(bi + 1) * m * n],
                            &mut g[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let ax = self.axis(axis);
        let (outer, len, inner) = self.outer_inner(ax);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let (y, gy) = (ctx.out, ctx.grad_out);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| y[at(l)] * gy[at(l)]).sum();
                        for l in 0..len {
                            g[at(l)] = y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad_out.to_vec())]),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a1: isize, a2: isize) -> Tensor {
        let (a1, a2) = (self.axis(a1), self.axis(a2));
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        perm.swap(a1, a2);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let src = self.shape();
        let n = src.len();
        let mut src_strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * src[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let numel = self.numel();
        let mut idx = Vec::with_capacity(numel);
        let mut counter = vec![0usize; n];
        let mut off = 0usize;
        for _ in 0..numel {
            idx.push(off);
            for d in (0..n).rev() {
                counter[d] += 1;
                off += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let x = self.data();
        let data = idx.iter().map(|&i| x[i]).collect();
        Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(scatter_reduce(ctx.grad_out, &idx, numel))]),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = self.axis(axis);
        let (outer, full, inner) = self.outer_inner(ax);
        if start + len > full || len == 0 {
            return Err(Error::Contract(format!(
                "narrow {start}..{} out of range for axis {ax} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&ctx.grad_out[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat(tensors: &[Tensor], axis: isize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let ax = first.axis(axis);
        for t in tensors {
            let ok = t.ndim() == first.ndim()
                && t
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
        }
        let outer: usize = first.shape()[..ax].iter().product();
        let inner: usize = first.shape()[ax + 1..].iter().product();
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            tensors.to_vec(),
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad_out[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(ctx.needs)
                    .map(|(g, &n)| n.then_some(g))
                    .collect()
            }),
        ))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor> {
        let nrows = self.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Lookup(format!("row {bad} out of range for {nrows} rows")));
        }
        if rows.is_empty() {
            return Err(Error::Contract("index_select with no rows".into()));
        }
        let width = self.numel() / nrows;
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; nrows * width];
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in g[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&ctx.grad_out[i * width..(i + 1) * width])
                    {
                        *a += b;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Adds row `i` of `self` into row `rows[i]` of a zero tensor with
    /// `nrows` rows. Inverse of [`Tensor::index_select`].
    pub fn scatter_rows(&self, rows: &[usize], nrows: usize) -> Result<Tensor> {
        if rows.len() != self.shape()[0] {
            return Err(Error::Contract(format!(
                "scatter_rows: {} indices for {} rows",
                rows.len(),
                self.shape()[0]
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Lookup(format!("row {bad} out of range for {nrows} rows")));
        }
        let width = self.numel() / rows.len();
        let x = self.data();
        let mut out = vec![0.0; nrows * width];
        for (i, &r) in rows.iter().enumerate() {
            for (a, b) in out[r * width..(r + 1) * width]
                .iter_mut()
                .zip(&x[i * width..(i + 1) * width])
            {
                *a += b;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = nrows;
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(rows.len() * width);
                for &r in &rows {
                    g.extend_from_slice(&ctx.grad_out[r * width..(r + 1) * width]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Multiplies by a constant tensor (no gradient flows into `mask`).
    pub fn mul_const(&self, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::shape("mul_const", self.shape(), &[mask.len()]));
        }
        let m = mask.to_vec();
        let data = self.data().iter().zip(&m).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad_out.iter().zip(&m).map(|(g, b)| g * b).collect())]
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
