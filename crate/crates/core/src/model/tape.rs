//! Reverse-mode differentiation over a linear record of tensor ops.

use super::kernels::{self, ConvShape, NormStat};
use super::tensor::Tensor;
use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    AvgPool { x: Var, kt: usize, kf: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<NormStat<T>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<NormStat<T>> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SruGate { gn: Var, gamma: Var, c: Var },
    BranchFuse { y1: Var, y2: Var, beta: Vec<T> },
    AccdoaHead { x: Var, dist_start: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Epsilon of the normalisation layers.
pub const NORM_EPS: f64 = 1e-5;
/// Added to the importance denominator of the spatial gate.
pub const GATE_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    keep_probs: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(expected: &[usize], got: &[usize]) -> SeldError {
    SeldError::Shape { expected: expected.to_vec(), got: got.to_vec() }
}

fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<T: Scalar> Tape<T> {
    /// A tape that can be differentiated.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), keep_probs: true }
    }

    /// A forward-only tape that drops attention probabilities after use.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), keep_probs: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Stride-1 "same" convolution of `x [n, c, h, w]` with `w [o, c/g, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 4 || wd.len() != 4 || groups == 0 {
            return Err(shape_err(&[0, 0, 0, 0], &xd));
        }
        let shape = ConvShape {
            n: xd[0],
            c_in: xd[1],
            h: xd[2],
            w: xd[3],
            c_out: wd[0],
            kh: wd[2],
            kw: wd[3],
            groups,
        };
        if shape.c_in % groups != 0 || shape.c_out % groups != 0 || wd[1] != shape.c_in / groups {
            return Err(SeldError::Domain(format!(
                "conv weight {wd:?} incompatible with {} input channels in {groups} groups",
                shape.c_in
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != [shape.c_out] {
                return Err(shape_err(&[shape.c_out], self.dims(b)));
            }
        }
        let y = kernels::conv2d_forward(&shape, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::new(vec![shape.n, shape.c_out, shape.h, shape.w], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, shape }, &inputs))
    }

    /// Average pooling over the last two axes of a 4-d tensor.
    pub fn avg_pool(&mut self, x: Var, kt: usize, kf: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 || kt == 0 || kf == 0 || d[2] % kt != 0 || d[3] % kf != 0 {
            return Err(SeldError::Domain(format!("cannot pool {d:?} by ({kt}, {kf})")));
        }
        let y = kernels::avg_pool_forward(self.data(x), d[0] * d[1], d[2], d[3], kt, kf);
        let value = Tensor::new(vec![d[0], d[1], d[2] / kt, d[3] / kf], y)?;
        Ok(self.push(value, Op::AvgPool { x, kt, kf }, &[x]))
    }

    /// Group norm of `x [n, c, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 {
            return Err(shape_err(&[0, 0], &d));
        }
        let (n, c) = (d[0], d[1]);
        if groups == 0 || c % groups != 0 {
            return Err(SeldError::Domain(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(shape_err(&[c], self.dims(gamma)));
        }
        let s: usize = d[2..].iter().product();
        let (y, stats) = kernels::group_norm_forward(
            self.data(x),
            n,
            c,
            s,
            groups,
            self.data(gamma),
            self.data(beta),
            T::lit(NORM_EPS),
        );
        let value = Tensor::new(d, y)?;
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let last = *d.last().ok_or_else(|| shape_err(&[0], &d))?;
        if self.dims(gamma) != [last] || self.dims(beta) != [last] {
            return Err(shape_err(&[last], self.dims(gamma)));
        }
        let (y, stats) =
            kernels::layer_norm_forward(self.data(x), last, self.data(gamma), self.data(beta), T::lit(NORM_EPS));
        let value = Tensor::new(d, y)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh { x }, &[x])
    }

    fn same_dims(&self, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    /// `x·Wᵀ + b` over the last axis; `w [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let d_in = *d.last().ok_or_else(|| shape_err(&[0], &d))?;
        if wd.len() != 2 || wd[1] != d_in {
            return Err(shape_err(&[wd.first().copied().unwrap_or(0), d_in], &wd));
        }
        let d_out = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [d_out] {
                return Err(shape_err(&[d_out], self.dims(b)));
            }
        }
        let y = kernels::linear_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), d_in, d_out);
        let mut od = d;
        *od.last_mut().expect("non-empty") = d_out;
        let value = Tensor::new(od, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let mut seen = vec![false; d.len()];
        if perm.len() != d.len() || perm.iter().any(|&p| p >= d.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(SeldError::Domain(format!("{perm:?} is not a permutation of {} axes", d.len())));
        }
        let (y, od) = kernels::permute(self.data(x), &d, perm);
        let value = Tensor::new(od, y)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() || start + len > d[axis] {
            return Err(SeldError::Domain(format!("cannot take [{start}, {}) of axis {axis} in {d:?}", start + len)));
        }
        let (outer, ext, inner) = split_at_axis(&d, axis);
        let src = self.data(x);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&src[(o * ext + start) * inner..][..len * inner]);
        }
        let mut od = d;
        od[axis] = len;
        let value = Tensor::new(od, y)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.dims(*parts.first().ok_or_else(|| SeldError::domain("nothing to concatenate"))?).to_vec();
        if axis >= first.len() {
            return Err(SeldError::Domain(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == first.len() && d.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(&first, d));
            }
            total += d[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.dims(p)[axis];
                y.extend_from_slice(&self.data(p)[o * ext * inner..][..ext * inner]);
            }
        }
        let mut od = first;
        od[axis] = total;
        let value = Tensor::new(od, y)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Scaled dot-product attention of projected `q, k, v [batch, seq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let d = self.dims(q).to_vec();
        self.same_dims(q, k)?;
        self.same_dims(q, v)?;
        if d.len() != 3 || heads == 0 || d[2] % heads != 0 {
            return Err(SeldError::Domain(format!("cannot split {d:?} into {heads} heads")));
        }
        let (ctx, probs) =
            kernels::attention_forward(self.data(q), self.data(k), self.data(v), d[0], d[1], d[2], heads);
        let probs = if self.keep_probs { probs } else { Vec::new() };
        let value = Tensor::new(d, ctx)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention probabilities of an attention node, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    /// Soft spatial gate `sigmoid(c·(w_ch − mean w)·gn)` with
    /// `w = γ / (Σ|γ| + eps)`, for `gn [n, ch, ...]`, `gamma [ch]`, `c [1]`.
    pub fn sru_gate(&mut self, gn: Var, gamma: Var, c: Var) -> Result<Var> {
        let d = self.dims(gn).to_vec();
        let ch = d.get(1).copied().unwrap_or(0);
        if self.dims(gamma) != [ch] || self.dims(c) != [1] {
            return Err(shape_err(&[ch], self.dims(gamma)));
        }
        let u = centered_importance(self.data(gamma));
        let cv = self.data(c)[0];
        let s: usize = d[2..].iter().product();
        let y = self
            .data(gn)
            .iter()
            .enumerate()
            .map(|(i, &g)| kernels::sigmoid(cv * u[(i / s) % ch] * g))
            .collect();
        let value = Tensor::new(d, y)?;
        Ok(self.push(value, Op::SruGate { gn, gamma, c }, &[gn, gamma, c]))
    }

    /// Per-channel soft selection between two branch maps `[n, c, ...]`:
    /// `β·y1 + (1−β)·y2` with `β = softmax(gap(y1), gap(y2))₀`.
    pub fn branch_fuse(&mut self, y1: Var, y2: Var) -> Result<Var> {
        self.same_dims(y1, y2)?;
        let d = self.dims(y1).to_vec();
        if d.len() < 2 {
            return Err(shape_err(&[0, 0], &d));
        }
        let s: usize = d[2..].iter().product();
        let m = T::from_usize_lossy(s.max(1));
        let (a, b) = (self.data(y1), self.data(y2));
        let beta: Vec<T> = a
            .chunks(s)
            .zip(b.chunks(s))
            .map(|(pa, pb)| {
                let s1 = pa.iter().copied().sum::<T>() / m;
                let s2 = pb.iter().copied().sum::<T>() / m;
                kernels::sigmoid(s1 - s2)
            })
            .collect();
        let y = a.iter().zip(b).enumerate().map(|(i, (&p, &q))| beta[i / s] * p + (T::one() - beta[i / s]) * q).collect();
        let value = Tensor::new(d, y)?;
        Ok(self.push(value, Op::BranchFuse { y1, y2, beta }, &[y1, y2]))
    }

    /// Output activation over the last axis: tanh below `dist_start`,
    /// sigmoid from there on.
    pub fn accdoa_head(&mut self, x: Var, dist_start: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let width = *d.last().ok_or_else(|| shape_err(&[0], &d))?;
        let y = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % width < dist_start { v.tanh() } else { kernels::sigmoid(v) })
            .collect();
        let value = Tensor::new(d, y)?;
        Ok(self.push(value, Op::AccdoaHead { x, dist_start }, &[x]))
    }

    /// Propagate `seed` (the gradient of some scalar with respect to `root`)
    /// back to every recorded value that requires a gradient.
    pub fn backward(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).numel() {
            return Err(shape_err(self.dims(root), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(shape, self.data(*x), self.data(*w), g, self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AvgPool { x, kt, kf } => {
                let d = self.dims(*x);
                let dx = kernels::avg_pool_backward(g, d[0] * d[1], d[2], d[3], *kt, *kf);
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let d = self.dims(*x);
                let s: usize = d[2..].iter().product();
                let (dx, dg, db) =
                    kernels::group_norm_backward(self.data(*x), g, d[1], s, *groups, self.data(*gamma), stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let last = *self.dims(*x).last().expect("non-empty");
                let (dx, dg, db) = kernels::layer_norm_backward(self.data(*x), g, last, self.data(*gamma), stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Gelu { x } => {
                let dx = self.data(*x).iter().zip(g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = y.iter().zip(g).map(|(&t, &gv)| gv * (T::one() - t * t)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(self.data(*b)).map(|(&gv, &q)| gv * q).collect();
                let db = g.iter().zip(self.data(*a)).map(|(&gv, &p)| gv * p).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Affine { x, scale } => {
                let dx = g.iter().map(|&gv| gv * *scale).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let wd = self.dims(*w);
                let (dx, dw, db) = kernels::linear_backward(self.data(*x), self.data(*w), g, wd[1], wd[0]);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(g, node.value.dims(), &inv);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Narrow { x, axis, start } => {
                let d = self.dims(*x);
                let (outer, ext, inner) = split_at_axis(d, *axis);
                let len = node.value.dims()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    dx[(o * ext + start) * inner..][..len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.dims(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.dims(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        dp.extend_from_slice(&g[(o * total + offset) * inner..][..ext * inner]);
                    }
                    offset += ext;
                    self.accumulate(grads, p, dp);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                if probs.is_empty() {
                    return Err(SeldError::domain("attention probabilities were not recorded"));
                }
                let d = self.dims(*q);
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    d[1],
                    d[2],
                    *heads,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SruGate { gn, gamma, c } => {
                let d = self.dims(*gn);
                let ch = d[1];
                let s: usize = d[2..].iter().product();
                let gam = self.data(*gamma);
                let u = centered_importance(gam);
                let cv = self.data(*c)[0];
                let gnv = self.data(*gn);
                let mut dgn = vec![T::zero(); gnv.len()];
                let mut du = vec![T::zero(); ch];
                let mut dc = T::zero();
                for i in 0..gnv.len() {
                    let k = (i / s) % ch;
                    let dz = g[i] * y[i] * (T::one() - y[i]);
                    dgn[i] = dz * cv * u[k];
                    du[k] += dz * cv * gnv[i];
                    dc += dz * u[k] * gnv[i];
                }
                // u = w − mean(w), w = γ / (Σ|γ| + eps).
                let mean_du = du.iter().copied().sum::<T>() / T::from_usize_lossy(ch);
                let dw: Vec<T> = du.iter().map(|&v| v - mean_du).collect();
                let denom = gam.iter().map(|v| v.abs()).sum::<T>() + T::lit(GATE_EPS);
                let cross = dw.iter().zip(gam).map(|(&a, &b)| a * b).sum::<T>() / (denom * denom);
                let dgamma = dw.iter().zip(gam).map(|(&a, &b)| a / denom - signum0(b) * cross).collect();
                self.accumulate(grads, *gn, dgn);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *c, vec![dc]);
            }
            Op::BranchFuse { y1, y2, beta } => {
                let (a, b) = (self.data(*y1), self.data(*y2));
                let s = a.len() / beta.len();
                let m = T::from_usize_lossy(s.max(1));
                let mut d1 = vec![T::zero(); a.len()];
                let mut d2 = vec![T::zero(); a.len()];
                for (u, &bt) in beta.iter().enumerate() {
                    let r = u * s..(u + 1) * s;
                    let dbeta: T = g[r.clone()].iter().zip(&a[r.clone()]).zip(&b[r.clone()]).map(|((&gv, &p), &q)| gv * (p - q)).sum();
                    let ds = dbeta * bt * (T::one() - bt) / m;
                    for i in r {
                        d1[i] = g[i] * bt + ds;
                        d2[i] = g[i] * (T::one() - bt) - ds;
                    }
                }
                self.accumulate(grads, *y1, d1);
                self.accumulate(grads, *y2, d2);
            }
            Op::AccdoaHead { x, dist_start } => {
                let width = *node.value.dims().last().expect("non-empty");
                let dx = y
                    .iter()
                    .zip(g)
                    .enumerate()
                    .map(|(i, (&o, &gv))| {
                        if i % width < *dist_start {
                            gv * (T::one() - o * o)
                        } else {
                            gv * o * (T::one() - o)
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn signum0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `w − mean(w)` with `w = γ / (Σ|γ| + eps)`.
pub fn centered_importance<T: Scalar>(gamma: &[T]) -> Vec<T> {
    let denom = gamma.iter().map(|v| v.abs()).sum::<T>() + T::lit(GATE_EPS);
    let w: Vec<T> = gamma.iter().map(|&g| g / denom).collect();
    let mean = w.iter().copied().sum::<T>() / T::from_usize_lossy(w.len().max(1));
    w.iter().map(|&v| v - mean).collect()
}
