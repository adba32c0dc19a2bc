//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns a gradient for every node. Tapes are cheap and single-threaded;
//! build one per forward pass.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, inverse_permutation, matmul,
    matmul_dims, numel, permute_raw, softmax_last, transpose_last, Tensor,
};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize),
    Silu(usize),
    Conv2d { x: usize, w: usize, b: usize },
    AvgPool2(usize),
    Upsample2(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    MeanLast(usize),
    Sum(usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf)
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `in_shape`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    if g.shape() == in_shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(in_shape);
    let st = broadcast_strides(in_shape, g.shape());
    let zero = vec![0; in_shape.len()];
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(g.shape(), &st, &zero, |o, i, _| od[i] += gd[o]);
    out
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| nodes[i].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = reduce_to(g, val(*a).shape());
            let gb = reduce_to(g, val(*b).shape());
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(g, val(*a).shape());
            let gb = reduce_to(g, val(*b).shape()).map(|x| -x);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let out_shape = g.shape();
            let sa = broadcast_strides(av.shape(), out_shape);
            let sb = broadcast_strides(bv.shape(), out_shape);
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            {
                let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                    gad[i] += gd[o] * bd[j];
                    gbd[j] += gd[o] * ad[i];
                });
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(grads, *a, g.map(|x| x * s));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k, n, shared) =
                matmul_dims(av.shape(), bv.shape()).expect("recorded matmul dims");
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = if shared { 0 } else { bi * k * n };
                let go = bi * m * n;
                for i in 0..m {
                    let grow = &gd[go + i * n..go + (i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[bo + p * n..bo + (p + 1) * n];
                        let mut acc = T::zero();
                        for (&gv, &bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        ga[ao + i * k + p] += acc;
                        let av = ad[ao + i * k + p];
                        let gbrow = &mut gb[bo + p * n..bo + (p + 1) * n];
                        for (o, &gv) in gbrow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape(), ga).expect("shape"));
            accumulate(grads, *b, Tensor::new(bv.shape(), gb).expect("shape"));
        }
        Op::Permute(a, perm) => {
            accumulate(grads, *a, permute_raw(g, &inverse_permutation(perm)));
        }
        Op::Reshape(a) => {
            let ga = g.reshape(val(*a).shape()).expect("reshape back");
            accumulate(grads, *a, ga);
        }
        Op::Softmax(a) => {
            let y = node.value.as_ref();
            let n = *y.shape().last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                ga.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            accumulate(grads, *a, Tensor::new(y.shape(), ga).expect("shape"));
        }
        Op::Silu(a) => {
            let x = val(*a);
            let ga = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                })
                .collect();
            accumulate(grads, *a, Tensor::new(x.shape(), ga).expect("shape"));
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (gx, gw, gb) = conv2d_backward(xv, wv, g);
            accumulate(grads, *x, gx);
            accumulate(grads, *w, gw);
            accumulate(grads, *b, gb);
        }
        Op::AvgPool2(a) => {
            let s = val(*a).shape().to_vec();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = numel(&s[..s.len() - 2]);
            let quarter = T::cst(0.25);
            let (ho, wo) = (h / 2, w / 2);
            let mut ga = vec![T::zero(); numel(&s)];
            let gd = g.data();
            for p in 0..planes {
                for y in 0..ho {
                    for x in 0..wo {
                        let gv = gd[p * ho * wo + y * wo + x] * quarter;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            ga[p * h * w + (2 * y + dy) * w + 2 * x + dx] += gv;
                        }
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(&s, ga).expect("shape"));
        }
        Op::Upsample2(a) => {
            let s = val(*a).shape().to_vec();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = numel(&s[..s.len() - 2]);
            let mut ga = vec![T::zero(); numel(&s)];
            let gd = g.data();
            for p in 0..planes {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        ga[p * h * w + (y / 2) * w + x / 2] += gd[p * 4 * h * w + y * 2 * w + x];
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(&s, ga).expect("shape"));
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                accumulate(grads, p, g.narrow(*axis, start, len).expect("concat slice"));
                start += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let s = val(*a).shape().to_vec();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut ga = vec![T::zero(); numel(&s)];
            let gd = g.data();
            for o in 0..outer {
                let dst = o * s[*axis] * inner + start * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            accumulate(grads, *a, Tensor::new(&s, ga).expect("shape"));
        }
        Op::MeanLast(a) => {
            let s = val(*a).shape().to_vec();
            let n = *s.last().unwrap();
            let inv = T::one() / T::cst(n as f64);
            let ga = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, n))
                .collect();
            accumulate(grads, *a, Tensor::new(&s, ga).expect("shape"));
        }
        Op::Sum(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, *a, Tensor::full(&s, g.data()[0]));
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// 2-D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`,
/// odd `k`, zero padding `k/2`, stride 1.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ci, h, wd) = dims4(x)?;
    let (co, ci2, kh, kw) = dims4(w)?;
    if ci != ci2 || kh != kw || kh % 2 == 0 || b.shape() != [co] {
        return Err(Error::shape(format!(
            "conv2d x {:?} w {:?} b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let k = kh;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); n * co * h * wd];
    let (xd, wdat) = (x.data(), w.data());
    for ni in 0..n {
        for o in 0..co {
            let oplane = &mut out[(ni * co + o) * h * wd..(ni * co + o + 1) * h * wd];
            oplane.fill(b.data()[o]);
            for c in 0..ci {
                let xplane = &xd[(ni * ci + c) * h * wd..(ni * ci + c + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(wd, dx);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &xplane[sy as usize * wd..(sy as usize + 1) * wd];
                            let orow = &mut oplane[y * wd..(y + 1) * wd];
                            for xx in x0..x1 {
                                orow[xx] += wv * srow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, h, wd], out)
}

fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(len), hi)
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::shape(format!("expected rank-4 tensor, got {s:?}"))),
    }
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = dims4(x).expect("conv x");
    let (co, _, k, _) = dims4(w).expect("conv w");
    let pad = (k / 2) as isize;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); co];
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for o in 0..co {
            let gplane = &gd[(ni * co + o) * h * wd..(ni * co + o + 1) * h * wd];
            gb[o] += gplane.iter().copied().sum::<T>();
            for c in 0..ci {
                let xoff = (ni * ci + c) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(wd, dx);
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = xoff + sy as usize * wd;
                            let grow = &gplane[y * wd..(y + 1) * wd];
                            for xx in x0..x1 {
                                let si = srow + (xx as isize + dx) as usize;
                                acc += grow[xx] * xd[si];
                                gx[si] += grow[xx] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), gx).expect("shape"),
        Tensor::new(w.shape(), gw).expect("shape"),
        Tensor::new(&[co], gb).expect("shape"),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let out = if a.shape() == b.shape() {
            a.zip_map(&b, f)?
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut data = vec![T::zero(); numel(&out_shape)];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
            Tensor::new(&out_shape, data)?
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().scale(s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(perm)?;
        Ok(self.tape.push(out, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn transpose_last(self) -> Var<'t, T> {
        let v = self.value();
        let r = v.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let out = transpose_last(&v);
        self.tape.push(out, Op::Permute(self.id, perm))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn softmax(self) -> Var<'t, T> {
        let out = softmax_last(&self.value());
        self.tape.push(out, Op::Softmax(self.id))
    }

    pub fn silu(self) -> Var<'t, T> {
        let out = self.value().map(silu);
        self.tape.push(out, Op::Silu(self.id))
    }

    pub fn conv2d(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = conv2d(&self.value(), &w.value(), &b.value())?;
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// 2x2 average pooling over the last two axes.
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 on {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = numel(&s[..s.len() - 2]);
        let q = T::cst(0.25);
        let d = v.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in 0..ho {
                for x in 0..wo {
                    let base = p * h * w + 2 * y * w + 2 * x;
                    out.push((d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * q);
                }
            }
        }
        let mut os = s.clone();
        let r = os.len();
        os[r - 2] = ho;
        os[r - 1] = wo;
        Ok(self.tape.push(Tensor::new(&os, out)?, Op::AvgPool2(self.id)))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2(self) -> Var<'t, T> {
        let v = self.value();
        let s = v.shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let d = v.data();
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.push(d[p * h * w + (y / 2) * w + x / 2]);
                }
            }
        }
        let mut os = s.clone();
        let r = os.len();
        os[r - 2] = 2 * h;
        os[r - 1] = 2 * w;
        self.tape
            .push(Tensor::new(&os, out).expect("shape"), Op::Upsample2(self.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(self.tape.push(
            out,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Mean over the last axis (the axis is removed).
    pub fn mean_last(self) -> Var<'t, T> {
        let v = self.value();
        let s = v.shape().to_vec();
        let n = *s.last().unwrap();
        let inv = T::one() / T::cst(n as f64);
        let data: Vec<T> = v
            .data()
            .chunks(n)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let mut os = s[..s.len() - 1].to_vec();
        if os.is_empty() {
            os.push(1);
        }
        self.tape
            .push(Tensor::new(&os, data).expect("shape"), Op::MeanLast(self.id))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::cst(n as f64))
    }

    /// Mean squared difference to `target`.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.sub(target)?;
        Ok(d.mul(d)?.mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` against the tape gradient of every
    /// entry of every input.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k]);
            for i in 0..inp.len() {
                let eval = |delta: f64| {
                    let t2 = Tape::new();
                    let vs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            t2.leaf(t)
                        })
                        .collect();
                    f(&t2, &vs).value().data()[0]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!(
                    (a - num).abs() / denom < 1e-5,
                    "input {k} elem {i}: analytic {a} numeric {num}"
                );
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn grad_broadcast_arithmetic() {
        check(vec![rnd(&[2, 3, 4], 1), rnd(&[1, 3, 1], 2)], |_, v| {
            let s = v[0].add(v[1]).unwrap();
            let p = s.mul(v[1]).unwrap();
            p.sub(v[0]).unwrap().mul(p).unwrap().sum()
        });
    }

    #[test]
    fn grad_matmul_softmax_silu() {
        check(
            vec![rnd(&[2, 3, 4], 3), rnd(&[4, 5], 4), rnd(&[2, 5, 2], 5)],
            |_, v| {
                let a = v[0].matmul(v[1]).unwrap().softmax();
                let b = a.matmul(v[2]).unwrap().silu();
                b.mul(b).unwrap().sum()
            },
        );
    }

    #[test]
    fn grad_conv_pool_upsample() {
        check(
            vec![rnd(&[2, 2, 4, 4], 6), rnd(&[3, 2, 3, 3], 7), rnd(&[3], 8)],
            |_, v| {
                let c = v[0].conv2d(v[1], v[2]).unwrap();
                let p = c.avg_pool2().unwrap().upsample2();
                let m = p.mul(c).unwrap();
                m.reshape(&[2, 3, 16]).unwrap().mean_last().mul(m.reshape(&[2, 3, 16]).unwrap().mean_last()).unwrap().sum()
            },
        );
    }

    #[test]
    fn grad_concat_narrow_permute() {
        check(vec![rnd(&[2, 3], 9), rnd(&[2, 2], 10)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1).unwrap();
            let p = c.permute(&[1, 0]).unwrap();
            let n = p.narrow(0, 1, 3).unwrap();
            n.mul(n).unwrap().scale(0.5).mean()
        });
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = rnd(&[1, 2, 5, 4], 11);
        let w = rnd(&[3, 2, 3, 3], 12);
        let b = rnd(&[3], 13);
        let y = conv2d(&x, &w, &b).unwrap();
        for o in 0..3 {
            for yy in 0..5i64 {
                for xx in 0..4i64 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                    acc += w.at(&[o, c, ky as usize, kx as usize])
                                        * x.at(&[0, c, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    let got = y.at(&[0, o, yy as usize, xx as usize]);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let v = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(v).is_err());
    }
}
