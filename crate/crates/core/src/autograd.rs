//! A small reverse-mode tape over rank-4 `[C, H, W, D]` activations.
//!
//! Only the operations the segmentation networks need are provided. Ops are
//! recorded in execution order, so the node list is already topologically
//! sorted and backward is a single reverse sweep.
//!
//! Convolution accumulates every output voxel over `(c_in, kernel offset)` in
//! a fixed order that does not depend on the spatial extent. A planar network
//! run on a whole volume therefore produces bit-identical values to running
//! it slice by slice.

use std::collections::BTreeMap;

use num_traits::Float;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    Conv { x: usize, w: usize, kernel: [usize; 3] },
    Bias { x: usize, b: usize },
    Relu { x: usize },
    AvgPool { x: usize, factors: [usize; 3] },
    Upsample { x: usize },
    Concat { a: usize, b: usize },
    Add { a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Scale { x: usize, s: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients keyed by parameter name.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// A named leaf; gradients are reported for it only when `trainable`.
    pub fn param(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> NodeId {
        self.push(t, Op::Param(name.to_string()), trainable)
    }

    /// "Same"-padded convolution. `w` is `[C_out, C_in * kh * kw * kd]`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, kernel: [usize; 3]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let out = conv_forward(xv, wv, kernel);
        let rg = self.rg(&[x.0, w.0]);
        self.push(out, Op::Conv { x: x.0, w: w.0, kernel }, rg)
    }

    pub fn bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let bv = self.nodes[b.0].value.data();
        let c = xv.channels();
        let vox = xv.len() / c;
        let mut out = xv.clone();
        for (ch, plane) in out.data_mut().chunks_mut(vox).enumerate() {
            let bb = bv[ch];
            for v in plane {
                *v = *v + bb;
            }
        }
        let rg = self.rg(&[x.0, b.0]);
        self.push(out, Op::Bias { x: x.0, b: b.0 }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    /// Average pooling with ceil-mode windows (edge windows average fewer voxels).
    pub fn avg_pool(&mut self, x: NodeId, factors: [usize; 3]) -> NodeId {
        let out = pool_forward(&self.nodes[x.0].value, factors);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::AvgPool { x: x.0, factors }, rg)
    }

    /// Nearest-neighbour resampling to `dims`.
    pub fn upsample(&mut self, x: NodeId, dims: [usize; 3]) -> NodeId {
        let out = upsample_forward(&self.nodes[x.0].value, dims);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Upsample { x: x.0 }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.spatial(), bv.spatial(), "concat spatial mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let [h, w, d] = av.spatial();
        let out = Tensor::from_vec(&[av.channels() + bv.channels(), h, w, d], data).unwrap();
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Concat { a: a.0, b: b.0 }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let st = T::from(s).unwrap();
        let out = self.nodes[x.0].value.scaled(st);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale { x: x.0, s }, rg)
    }

    /// Back-propagates the given output seeds and returns gradients of every
    /// trainable parameter reached.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.nodes[id.0].value.shape(), "seed shape");
            accumulate(&mut grads[id.0], (*g).clone());
            top = top.max(id.0 + 1);
        }
        let mut out = Grads::new();
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let need = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Conv { x, w, kernel } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    if need(*w) {
                        accumulate(&mut grads[*w], conv_grad_weight(xv, &g, wv.shape(), *kernel));
                    }
                    if need(*x) {
                        accumulate(&mut grads[*x], conv_grad_input(&g, wv, xv.shape(), *kernel));
                    }
                }
                Op::Bias { x, b } => {
                    if need(*b) {
                        let c = g.channels();
                        let vox = g.len() / c;
                        let gb: Vec<T> = g
                            .data()
                            .chunks(vox)
                            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        accumulate(&mut grads[*b], Tensor::from_vec(&[c], gb).unwrap());
                    }
                    if need(*x) {
                        accumulate(&mut grads[*x], g);
                    }
                }
                Op::Relu { x } => {
                    if need(*x) {
                        let xv = self.nodes[*x].value.data();
                        let mut gx = g;
                        for (gv, &xi) in gx.data_mut().iter_mut().zip(xv) {
                            if xi <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::AvgPool { x, factors } => {
                    if need(*x) {
                        let xs = self.nodes[*x].value.shape();
                        accumulate(&mut grads[*x], pool_backward(&g, xs, *factors));
                    }
                }
                Op::Upsample { x } => {
                    if need(*x) {
                        let xs = self.nodes[*x].value.shape();
                        accumulate(&mut grads[*x], upsample_backward(&g, xs));
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[*a].value.len();
                    let (ga, gb) = g.data().split_at(ca);
                    if need(*a) {
                        let s = self.nodes[*a].value.shape();
                        accumulate(&mut grads[*a], Tensor::from_vec(s, ga.to_vec()).unwrap());
                    }
                    if need(*b) {
                        let s = self.nodes[*b].value.shape();
                        accumulate(&mut grads[*b], Tensor::from_vec(s, gb.to_vec()).unwrap());
                    }
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::MatMul { a, b } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if need(*a) {
                        accumulate(&mut grads[*a], matmul(&g, &transpose(bv)));
                    }
                    if need(*b) {
                        accumulate(&mut grads[*b], matmul(&transpose(av), &g));
                    }
                }
                Op::Scale { x, s } => {
                    if need(*x) {
                        accumulate(&mut grads[*x], g.scaled(T::from(*s).unwrap()));
                    }
                }
            }
        }
        out
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Valid output range along one axis for a kernel offset `o`.
#[inline]
fn range(len: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi = (len as isize - o).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Calls `f(out_start, in_start, len)` for every contiguous run of voxels
/// that a kernel offset `(oa, ob, oc)` connects, in `(h, w, d)` order.
#[inline]
fn for_each_run(dims: [usize; 3], off: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [hh, ww, dd] = dims;
    let (hlo, hhi) = range(hh, off[0]);
    let (wlo, whi) = range(ww, off[1]);
    let (dlo, dhi) = range(dd, off[2]);
    if hlo >= hhi || wlo >= whi || dlo >= dhi {
        return;
    }
    let shift = (off[0] * (ww * dd) as isize) + off[1] * dd as isize + off[2];
    for h in hlo..hhi {
        if off[2] == 0 {
            let start = (h * ww + wlo) * dd;
            let len = (whi - wlo) * dd;
            f(start, (start as isize + shift) as usize, len);
        } else {
            for w in wlo..whi {
                let start = (h * ww + w) * dd + dlo;
                f(start, (start as isize + shift) as usize, dhi - dlo);
            }
        }
    }
}

fn kernel_offsets(kernel: [usize; 3]) -> Vec<[isize; 3]> {
    let mut v = Vec::with_capacity(kernel.iter().product());
    for a in 0..kernel[0] {
        for b in 0..kernel[1] {
            for c in 0..kernel[2] {
                v.push([
                    a as isize - (kernel[0] / 2) as isize,
                    b as isize - (kernel[1] / 2) as isize,
                    c as isize - (kernel[2] / 2) as isize,
                ]);
            }
        }
    }
    v
}

fn conv_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, kernel: [usize; 3]) -> Tensor<T> {
    let ci_n = x.channels();
    let dims = x.spatial();
    let vox = dims.iter().product::<usize>();
    let kv = kernel.iter().product::<usize>();
    let co_n = w.shape()[0];
    assert_eq!(w.shape()[1], ci_n * kv, "conv weight/input channel mismatch");
    let offs = kernel_offsets(kernel);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); co_n * vox];
    for (co, oplane) in out.chunks_mut(vox).enumerate() {
        for ci in 0..ci_n {
            let iplane = &xd[ci * vox..(ci + 1) * vox];
            for (k, off) in offs.iter().enumerate() {
                let wv = wd[co * ci_n * kv + ci * kv + k];
                for_each_run(dims, *off, |o, i, len| {
                    for (ov, &iv) in oplane[o..o + len].iter_mut().zip(&iplane[i..i + len]) {
                        *ov = *ov + wv * iv;
                    }
                });
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = co_n;
    Tensor::from_vec(&shape, out).unwrap()
}

fn conv_grad_input<T: Float>(g: &Tensor<T>, w: &Tensor<T>, xshape: &[usize], kernel: [usize; 3]) -> Tensor<T> {
    let ci_n = xshape[0];
    let dims = [xshape[1], xshape[2], xshape[3]];
    let vox = dims.iter().product::<usize>();
    let kv = kernel.iter().product::<usize>();
    let co_n = g.channels();
    let offs = kernel_offsets(kernel);
    let gd = g.data();
    let wd = w.data();
    let mut gx = vec![T::zero(); ci_n * vox];
    for (ci, xplane) in gx.chunks_mut(vox).enumerate() {
        for co in 0..co_n {
            let gplane = &gd[co * vox..(co + 1) * vox];
            for (k, off) in offs.iter().enumerate() {
                let wv = wd[co * ci_n * kv + ci * kv + k];
                for_each_run(dims, *off, |o, i, len| {
                    for (xv, &gv) in xplane[i..i + len].iter_mut().zip(&gplane[o..o + len]) {
                        *xv = *xv + wv * gv;
                    }
                });
            }
        }
    }
    Tensor::from_vec(xshape, gx).unwrap()
}

fn conv_grad_weight<T: Float>(x: &Tensor<T>, g: &Tensor<T>, wshape: &[usize], kernel: [usize; 3]) -> Tensor<T> {
    let ci_n = x.channels();
    let dims = x.spatial();
    let vox = dims.iter().product::<usize>();
    let kv = kernel.iter().product::<usize>();
    let co_n = g.channels();
    let offs = kernel_offsets(kernel);
    let xd = x.data();
    let gd = g.data();
    let mut gw = vec![T::zero(); co_n * ci_n * kv];
    for co in 0..co_n {
        let gplane = &gd[co * vox..(co + 1) * vox];
        for ci in 0..ci_n {
            let iplane = &xd[ci * vox..(ci + 1) * vox];
            for (k, off) in offs.iter().enumerate() {
                let mut acc = T::zero();
                for_each_run(dims, *off, |o, i, len| {
                    let mut s = T::zero();
                    for (&gv, &iv) in gplane[o..o + len].iter().zip(&iplane[i..i + len]) {
                        s = s + gv * iv;
                    }
                    acc = acc + s;
                });
                gw[co * ci_n * kv + ci * kv + k] = acc;
            }
        }
    }
    Tensor::from_vec(wshape, gw).unwrap()
}

fn pooled_dims(dims: [usize; 3], f: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|k| dims[k].div_ceil(f[k]))
}

fn pool_forward<T: Float>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let c = x.channels();
    let dims = x.spatial();
    let od = pooled_dims(dims, f);
    let ovox: usize = od.iter().product();
    let mut out = vec![T::zero(); c * ovox];
    let mut idx = 0;
    for ch in 0..c {
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let o = ch * ovox + ((h / f[0]) * od[1] + w / f[1]) * od[2] + d / f[2];
                    out[o] = out[o] + x.data()[idx];
                    idx += 1;
                }
            }
        }
    }
    for ch in 0..c {
        for h in 0..od[0] {
            for w in 0..od[1] {
                for d in 0..od[2] {
                    let n = window(dims[0], f[0], h) * window(dims[1], f[1], w) * window(dims[2], f[2], d);
                    let o = ch * ovox + (h * od[1] + w) * od[2] + d;
                    out[o] = out[o] / T::from(n).unwrap();
                }
            }
        }
    }
    Tensor::from_vec(&[c, od[0], od[1], od[2]], out).unwrap()
}

#[inline]
fn window(len: usize, f: usize, i: usize) -> usize {
    f.min(len - i * f)
}

fn pool_backward<T: Float>(g: &Tensor<T>, xshape: &[usize], f: [usize; 3]) -> Tensor<T> {
    let c = xshape[0];
    let dims = [xshape[1], xshape[2], xshape[3]];
    let od = pooled_dims(dims, f);
    let ovox: usize = od.iter().product();
    let mut gx = Vec::with_capacity(c * dims.iter().product::<usize>());
    for ch in 0..c {
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let (ph, pw, pd) = (h / f[0], w / f[1], d / f[2]);
                    let n = window(dims[0], f[0], ph) * window(dims[1], f[1], pw) * window(dims[2], f[2], pd);
                    let o = ch * ovox + (ph * od[1] + pw) * od[2] + pd;
                    gx.push(g.data()[o] / T::from(n).unwrap());
                }
            }
        }
    }
    Tensor::from_vec(xshape, gx).unwrap()
}

fn src_index(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

fn upsample_forward<T: Float>(x: &Tensor<T>, to: [usize; 3]) -> Tensor<T> {
    let c = x.channels();
    let s = x.spatial();
    let svox: usize = s.iter().product();
    let mut out = Vec::with_capacity(c * to.iter().product::<usize>());
    for ch in 0..c {
        for h in 0..to[0] {
            let sh = src_index(h, s[0], to[0]);
            for w in 0..to[1] {
                let sw = src_index(w, s[1], to[1]);
                for d in 0..to[2] {
                    let sd = src_index(d, s[2], to[2]);
                    out.push(x.data()[ch * svox + (sh * s[1] + sw) * s[2] + sd]);
                }
            }
        }
    }
    Tensor::from_vec(&[c, to[0], to[1], to[2]], out).unwrap()
}

fn upsample_backward<T: Float>(g: &Tensor<T>, xshape: &[usize]) -> Tensor<T> {
    let c = xshape[0];
    let s = [xshape[1], xshape[2], xshape[3]];
    let to = g.spatial();
    let svox: usize = s.iter().product();
    let mut gx = vec![T::zero(); c * svox];
    let mut idx = 0;
    for ch in 0..c {
        for h in 0..to[0] {
            let sh = src_index(h, s[0], to[0]);
            for w in 0..to[1] {
                let sw = src_index(w, s[1], to[1]);
                for d in 0..to[2] {
                    let sd = src_index(d, s[2], to[2]);
                    let o = ch * svox + (sh * s[1] + sw) * s[2] + sd;
                    gx[o] = gx[o] + g.data()[idx];
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_vec(xshape, gx).unwrap()
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims");
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b.data()[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

fn transpose<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out).unwrap()
}
