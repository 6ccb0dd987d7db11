//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every op in creation order, which is a topological
//! order, so the backward pass is a single reverse sweep. Parameters enter the
//! tape by reference; a training step builds one tape per example and throws
//! it away after [`Graph::backward`].

use std::borrow::Cow;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Interleave { src: Var, fill: Var, visible: Vec<usize> },
    RowMse { pred: Var, target: Tensor<T>, rows: Vec<usize> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf owned by the tape.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `x[m, k] * w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Matmul(x, w), rg))
    }

    /// `a[m, k] * b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}^T", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k, 1, bv.data(), 1, k, T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatmulNt(a, b), rg))
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale shape {:?}", self.value(s).shape())));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    /// Standardizes each row (population variance, eps 1e-6), then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("input {:?}, affine dim {}", xv.shape(), d)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.chunks(d).flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gg), &bb)| h * gg + bb)).collect();
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Multiplies by a fixed keep-mask (entries 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", "mask length"));
        }
        let out: Vec<T> = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {n}")));
        }
        let data: Vec<T> = xv.data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let out = Tensor::new(&[xv.rows(), len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Output row `r` is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if index.is_empty() || index.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::shape("gather_rows", "index out of range"));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[index.len(), n], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    /// Builds a `total`-row sequence: row `visible[r]` is `src` row `r`, every
    /// other row is the `fill` vector.
    pub fn interleave(&mut self, src: Var, fill: Var, visible: &[usize], total: usize) -> Result<Var> {
        let (sv, fv) = (self.value(src), self.value(fill));
        let d = sv.cols();
        if fv.len() != d || sv.rows() != visible.len() || visible.iter().any(|&v| v >= total) {
            return Err(Error::shape("interleave", format!("src {:?}, fill {:?}, total {total}", sv.shape(), fv.shape())));
        }
        let mut data = Vec::with_capacity(total * d);
        for _ in 0..total {
            data.extend_from_slice(fv.data());
        }
        for (r, &slot) in visible.iter().enumerate() {
            data[slot * d..(slot + 1) * d].copy_from_slice(sv.row(r));
        }
        let out = Tensor::new(&[total, d], data)?;
        let rg = self.rg(src) || self.rg(fill);
        Ok(self.push(out, Op::Interleave { src, fill, visible: visible.to_vec() }, rg))
    }

    /// Mean squared error between `pred` and `target` over the listed rows,
    /// averaged over (rows x columns).
    pub fn row_mse(&mut self, pred: Var, target: Tensor<T>, rows: &[usize]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        if rows.is_empty() {
            return Err(Error::Empty("mse rows"));
        }
        let n = pv.cols();
        let mut acc = T::zero();
        for &r in rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                acc += (p - t) * (p - t);
            }
        }
        let loss = acc / T::of((rows.len() * n) as f64);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::RowMse { pred, target, rows: rows.to_vec() }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let rows: Vec<usize> = (0..self.value(pred).rows()).collect();
        self.row_mse(pred, target, &rows)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a single element"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized above").data_mut());
    }

    fn propagate(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                // dx = gy * w^T, dw = x^T * gy
                self.accumulate_with(grads, x, |dx| {
                    T::gemm(m, n, k, T::one(), gy.data(), n, 1, wv.data(), 1, n, T::one(), dx)
                });
                self.accumulate_with(grads, w, |dw| {
                    T::gemm(k, m, n, T::one(), xv.data(), 1, k, gy.data(), n, 1, T::one(), dw)
                });
            }
            &Op::MatmulNt(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                // da = gy * b, db = gy^T * a
                self.accumulate_with(grads, a, |da| {
                    T::gemm(m, n, k, T::one(), gy.data(), n, 1, bv.data(), k, 1, T::one(), da)
                });
                self.accumulate_with(grads, b, |db| {
                    T::gemm(n, m, k, T::one(), gy.data(), 1, n, av.data(), k, 1, T::one(), db)
                });
            }
            &Op::AddBias(x, b) => {
                self.accumulate(grads, x, gy.clone());
                let n = gy.cols();
                self.accumulate_with(grads, b, |db| {
                    for row in gy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate_with(grads, a, |da| {
                    for ((d, &g), &o) in da.iter_mut().zip(gy.data()).zip(bv.data()) {
                        *d += g * o;
                    }
                });
                self.accumulate_with(grads, b, |db| {
                    for ((d, &g), &o) in db.iter_mut().zip(gy.data()).zip(av.data()) {
                        *d += g * o;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, gy.map(|g| g * c));
            }
            &Op::ScaleBy(x, s) => {
                let c = self.value(s).data()[0];
                self.accumulate(grads, x, gy.map(|g| g * c));
                let xv = self.value(x);
                let ds: T = gy.data().iter().zip(xv.data()).map(|(&g, &v)| g * v).sum();
                self.accumulate_with(grads, s, |d| d[0] += ds);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = gy.cols();
                let g = self.value(*gamma).data();
                self.accumulate_with(grads, *gamma, |dg| {
                    for (grow, hrow) in gy.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |db| {
                    for grow in gy.data().chunks(d) {
                        for (o, &gv) in db.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
                let dn = T::of(d as f64);
                self.accumulate_with(grads, *x, |dx| {
                    for (r, ((dxrow, grow), hrow)) in
                        dx.chunks_mut(d).zip(gy.data().chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for ((&gv, &gg), &h) in grow.iter().zip(g).zip(hrow) {
                            let dh = gv * gg;
                            mean_dh += dh;
                            mean_dh_h += dh * h;
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for (((o, &gv), &gg), &h) in dxrow.iter_mut().zip(grow).zip(g).zip(hrow) {
                            *o += rstd[r] * (gv * gg - mean_dh - h * mean_dh_h);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.accumulate_with(grads, x, |dx| {
                    for ((o, &g), &v) in dx.iter_mut().zip(gy.data()).zip(xv.data()) {
                        *o += g * gelu_parts(v).1;
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = y.cols();
                self.accumulate_with(grads, x, |dx| {
                    for ((dxrow, grow), yrow) in dx.chunks_mut(n).zip(gy.data().chunks(n)).zip(y.data().chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                        for ((o, &g), &p) in dxrow.iter_mut().zip(grow).zip(yrow) {
                            *o += p * (g - dot);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                self.accumulate_with(grads, *x, |dx| {
                    for ((o, &g), &m) in dx.iter_mut().zip(gy.data()).zip(mask) {
                        *o += g * m;
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).cols();
                let len = gy.cols();
                self.accumulate_with(grads, x, |dx| {
                    for (dxrow, grow) in dx.chunks_mut(n).zip(gy.data().chunks(len)) {
                        for (o, &g) in dxrow[start..start + len].iter_mut().zip(grow) {
                            *o += g;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate_with(grads, p, |dp| {
                        for (prow, grow) in dp.chunks_mut(w).zip(gy.data().chunks(total)) {
                            for (o, &g) in prow.iter_mut().zip(&grow[offset..offset + w]) {
                                *o += g;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let n = gy.cols();
                self.accumulate_with(grads, *x, |dx| {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &g) in dx[i * n..(i + 1) * n].iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                });
            }
            Op::Interleave { src, fill, visible } => {
                let d = gy.cols();
                self.accumulate_with(grads, *src, |ds| {
                    for (r, &slot) in visible.iter().enumerate() {
                        for (o, &g) in ds[r * d..(r + 1) * d].iter_mut().zip(gy.row(slot)) {
                            *o += g;
                        }
                    }
                });
                let mut is_visible = vec![false; gy.rows()];
                for &v in visible {
                    is_visible[v] = true;
                }
                self.accumulate_with(grads, *fill, |df| {
                    for (slot, vis) in is_visible.iter().enumerate() {
                        if !vis {
                            for (o, &g) in df.iter_mut().zip(gy.row(slot)) {
                                *o += g;
                            }
                        }
                    }
                });
            }
            Op::RowMse { pred, target, rows } => {
                let pv = self.value(*pred);
                let n = pv.cols();
                let scale = gy.data()[0] * T::of(2.0) / T::of((rows.len() * n) as f64);
                self.accumulate_with(grads, *pred, |dp| {
                    for &r in rows {
                        for c in 0..n {
                            let k = r * n + c;
                            dp[k] += scale * (pv.data()[k] - target.data()[k]);
                        }
                    }
                });
            }
        }
    }
}
