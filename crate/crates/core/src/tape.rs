//! A small reverse-mode autodiff tape over flat real buffers.
//!
//! Values are computed eagerly as operations are recorded; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! depends on a leaf marked as trainable. Matrix operands are rank 2; the
//! model keeps latents channel-major (`[C, H*W]`) so per-token linear maps are
//! left multiplications.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index value that makes [`Tape::gather`] emit a zero.
pub const GATHER_ZERO: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        /// Per-query softmax shift and reciprocal normalizer.
        row_max: Vec<T>,
        row_inv: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Arc<[u32]>),
    Concat(Var, Var),
    SumSq(Var),
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaves
/// keep their gradient; intermediate buffers are released during the sweep.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, g: &Grid) -> Var {
        self.push(g.shape().to_vec(), g.data().iter().map(|&v| T::from_f32(v)).collect(), Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, g: &Grid) -> Var {
        self.push(g.shape().to_vec(), g.data().iter().map(|&v| T::from_f32(v)).collect(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: &[usize], value: Vec<T>) -> Var {
        self.push(shape.to_vec(), value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grid(&self, v: Var) -> Grid {
        let n = &self.nodes[v.0];
        Grid::new(&n.shape, n.value.iter().map(|v| v.to_f32()).collect()).expect("tape node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => bail!(Shape, "matrix operand must be rank 2, got {:?}", s),
        }
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            bail!(Shape, "matmul inner extents {} vs {}", k, k2);
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(&mut out, self.value(a), ta, self.value(b), tb, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn same(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{:?} vs {:?}", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same(a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, s), ng)
    }

    /// Adds `v[c]` to every element of channel `c` of `x` (`x` is `[C, ...]`).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(v).len() != c {
            bail!(Shape, "channel vector of length {} for {:?}", self.value(v).len(), self.shape(x));
        }
        let per = self.value(x).len() / c;
        let xv = self.value(x);
        let vv = self.value(v);
        let value = xv
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / per])
            .collect();
        let ng = self.ng(x) || self.ng(v);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddChannel(x, v), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Silu(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax of a scalar");
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(shape, value, Op::SoftmaxRows(a), ng)
    }

    /// Single-head attention over the columns of `[C, N]` token matrices:
    /// `out = V · softmax(Qᵀ K)ᵀ` with the softmax taken per query. Scale `q`
    /// beforehand. Queries are processed one at a time and only the per-row
    /// softmax statistics are kept; the backward pass recomputes each row, so
    /// no `N x N` buffer is ever allocated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (cq, n) = self.dims2(q)?;
        let (ck, nk) = self.dims2(k)?;
        let (cv, nv) = self.dims2(v)?;
        if cq != ck || nk != n || nv != n {
            bail!(Shape, "attention operands {:?}, {:?}, {:?}", self.shape(q), self.shape(k), self.shape(v));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut row = vec![T::ZERO; n];
        let mut row_max = vec![T::ZERO; n];
        let mut row_inv = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; cv * n];
        for i in 0..n {
            attention_scores(&mut row, qv, kv, cq, n, i);
            let (m, inv) = softmax_in_place(&mut row);
            row_max[i] = m;
            row_inv[i] = inv;
            for c in 0..cv {
                out[c * n + i] = dot(&vv[c * n..(c + 1) * n], &row);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![cv, n],
            out,
            Op::Attention {
                q,
                k,
                v,
                row_max,
                row_inv,
            },
            ng,
        ))
    }

    /// Layer normalization over the channel axis of a `[C, N]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, n) = self.dims2(x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            bail!(Shape, "layer norm affine parameters must have length {}", c);
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cf = T::from_f64(c as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = vec![T::ZERO; c * n];
        let mut rstd = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; c * n];
        for j in 0..n {
            let mut mean = T::ZERO;
            for i in 0..c {
                mean += xv[i * n + j];
            }
            mean = mean / cf;
            let mut var = T::ZERO;
            for i in 0..c {
                let d = xv[i * n + j] - mean;
                var += d * d;
            }
            var = var / cf;
            let r = T::ONE / (var + eps).sqrt();
            rstd[j] = r;
            for i in 0..c {
                let h = (xv[i * n + j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[i] * h + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            vec![c, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            bail!(Shape, "gather index of length {} for shape {:?}", index.len(), shape);
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                value.push(T::ZERO);
            } else {
                match xv.get(i as usize) {
                    Some(&v) => value.push(v),
                    None => bail!(Shape, "gather index {} out of range {}", i, xv.len()),
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), value, Op::Gather(x, index), ng))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            bail!(Shape, "cannot concatenate {:?} and {:?}", sa, sb);
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, value, Op::Concat(a, b), ng))
    }

    /// Sum of squares as a `[1]` node, accumulated in `f64`.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&v| v.to_f64() * v.to_f64()).sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![T::from_f64(s)], Op::SumSq(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape(a), shape);
        }
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// Back-propagates `seed * d(root)` through the tape.
    pub fn backward(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).len() {
            bail!(Shape, "seed of length {} for root {:?}", seed.len(), self.shape(root));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.to_vec());
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                if self.ng(a) {
                    let mut da = vec![T::ZERO; m * k];
                    if ta {
                        gemm(&mut da, self.value(b), tb, dy, true, k, n, m);
                    } else {
                        gemm(&mut da, dy, false, self.value(b), !tb, m, n, k);
                    }
                    accumulate_owned(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = vec![T::ZERO; k * n];
                    if tb {
                        gemm(&mut db, dy, true, self.value(a), ta, n, m, k);
                    } else {
                        gemm(&mut db, self.value(a), !ta, dy, false, k, m, n);
                    }
                    accumulate_owned(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc_if(grads, a, dy);
                self.acc_if(grads, b, dy);
            }
            &Op::Sub(a, b) => {
                self.acc_if(grads, a, dy);
                if self.ng(b) {
                    let neg: Vec<T> = dy.iter().map(|&g| -g).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let g: Vec<T> = dy.iter().zip(self.value(b)).map(|(&g, &y)| g * y).collect();
                    accumulate_owned(grads, a, g);
                }
                if self.ng(b) {
                    let g: Vec<T> = dy.iter().zip(self.value(a)).map(|(&g, &x)| g * x).collect();
                    accumulate_owned(grads, b, g);
                }
            }
            &Op::Scale(a, s) => {
                let g: Vec<T> = dy.iter().map(|&g| g * s).collect();
                accumulate_owned(grads, a, g);
            }
            &Op::AddChannel(x, v) => {
                self.acc_if(grads, x, dy);
                if self.ng(v) {
                    let c = self.value(v).len();
                    let per = dy.len() / c;
                    let g: Vec<T> = dy
                        .chunks_exact(per)
                        .map(|ch| T::from_f64(ch.iter().map(|&x| x.to_f64()).sum::<f64>()))
                        .collect();
                    accumulate_owned(grads, v, g);
                }
            }
            &Op::Silu(a) => {
                let g: Vec<T> = dy
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * (s * (T::ONE + x * (T::ONE - s)))
                    })
                    .collect();
                accumulate_owned(grads, a, g);
            }
            &Op::SoftmaxRows(a) => {
                let n = *node.shape.last().unwrap();
                let mut g = vec![T::ZERO; dy.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact_mut(n)
                    .zip(node.value.chunks_exact(n))
                    .zip(dy.chunks_exact(n))
                {
                    let dot = dot(dr, yr);
                    for ((o, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = y * (d - dot);
                    }
                }
                accumulate_owned(grads, a, g);
            }
            Op::Attention {
                q,
                k,
                v,
                row_max,
                row_inv,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let cq = self.shape(q)[0];
                let (cv, n) = (node.shape[0], node.shape[1]);
                let mut dq = vec![T::ZERO; cq * n];
                let mut dk = vec![T::ZERO; cq * n];
                let mut dv = vec![T::ZERO; cv * n];
                let mut ds = vec![T::ZERO; n];
                let mut row = vec![T::ZERO; n];
                for i in 0..n {
                    attention_scores(&mut row, qv, kv, cq, n, i);
                    let (m, inv) = (row_max[i], row_inv[i]);
                    for p in row.iter_mut() {
                        *p = (*p - m).exp() * inv;
                    }
                    let row = &row[..];
                    ds.iter_mut().for_each(|d| *d = T::ZERO);
                    for c in 0..cv {
                        let g = dy[c * n + i];
                        for (d, &vvj) in ds.iter_mut().zip(&vv[c * n..(c + 1) * n]) {
                            *d += g * vvj;
                        }
                        for (d, &p) in dv[c * n..(c + 1) * n].iter_mut().zip(row) {
                            *d += g * p;
                        }
                    }
                    let rowdot = dot(&ds, row);
                    for (d, &p) in ds.iter_mut().zip(row) {
                        *d = p * (*d - rowdot);
                    }
                    for c in 0..cq {
                        dq[c * n + i] = dot(&kv[c * n..(c + 1) * n], &ds);
                        let a = qv[c * n + i];
                        for (d, &s) in dk[c * n..(c + 1) * n].iter_mut().zip(&ds) {
                            *d += a * s;
                        }
                    }
                }
                if self.ng(q) {
                    accumulate_owned(grads, q, dq);
                }
                if self.ng(k) {
                    accumulate_owned(grads, k, dk);
                }
                if self.ng(v) {
                    accumulate_owned(grads, v, dv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (c, n) = (node.shape[0], node.shape[1]);
                let gv = self.value(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::ZERO; c];
                    let mut db = vec![T::ZERO; c];
                    for i in 0..c {
                        let (mut sg, mut sb) = (0.0f64, 0.0f64);
                        for j in 0..n {
                            sg += (dy[i * n + j] * xhat[i * n + j]).to_f64();
                            sb += dy[i * n + j].to_f64();
                        }
                        dg[i] = T::from_f64(sg);
                        db[i] = T::from_f64(sb);
                    }
                    self.acc_if(grads, *gamma, &dg);
                    self.acc_if(grads, *beta, &db);
                }
                if self.ng(*x) {
                    let mut dx = vec![T::ZERO; c * n];
                    let cf = T::from_f64(c as f64);
                    for j in 0..n {
                        let (mut s1, mut s2) = (T::ZERO, T::ZERO);
                        for i in 0..c {
                            let dh = dy[i * n + j] * gv[i];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        for i in 0..c {
                            let dh = dy[i * n + j] * gv[i];
                            dx[i * n + j] = rstd[j] / cf * (cf * dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    accumulate_owned(grads, *x, dx);
                }
            }
            Op::Gather(x, index) => {
                let mut g = vec![T::ZERO; self.value(*x).len()];
                for (&i, &d) in index.iter().zip(dy) {
                    if i != GATHER_ZERO {
                        g[i as usize] += d;
                    }
                }
                accumulate_owned(grads, *x, g);
            }
            &Op::Concat(a, b) => {
                let split = self.value(a).len();
                self.acc_if(grads, a, &dy[..split]);
                self.acc_if(grads, b, &dy[split..]);
            }
            &Op::SumSq(a) => {
                let two = T::from_f64(2.0);
                let g: Vec<T> = self.value(a).iter().map(|&x| two * x * dy[0]).collect();
                accumulate_owned(grads, a, g);
            }
            &Op::Reshape(a) => accumulate(grads, a, dy),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if self.ng(v) {
            accumulate(grads, v, g);
        }
    }
}

/// `row[j] = Σ_c q[c, i] k[c, j]`.
fn attention_scores<T: Real>(row: &mut [T], q: &[T], k: &[T], c: usize, n: usize, i: usize) {
    row.iter_mut().for_each(|r| *r = T::ZERO);
    for ch in 0..c {
        let a = q[ch * n + i];
        for (r, &kk) in row.iter_mut().zip(&k[ch * n..(ch + 1) * n]) {
            *r += a * kk;
        }
    }
}

/// Normalizes `row` in place and returns the shift and reciprocal sum used.
fn softmax_in_place<T: Real>(row: &mut [T]) -> (T, T) {
    let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let sum = row.iter().fold(T::ZERO, |s, &v| s + v);
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    (max, inv)
}

fn accumulate_owned<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Dot product with eight independent accumulators (vectorizes without
/// reassociation by the compiler; the summation order is fixed).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m, n] += op(a)[m, k] · op(b)[k, n]`. Storage: `a` is `[m, k]`, or
/// `[k, m]` when `ta`; `b` is `[k, n]`, or `[n, k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(out: &mut [T], a: &[T], ta: bool, b: &[T], tb: bool, m: usize, k: usize, n: usize) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::ZERO {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == T::ZERO {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, true) => {
            let mut at = vec![T::ZERO; m * k];
            for p in 0..k {
                for i in 0..m {
                    at[i * k + p] = a[p * m + i];
                }
            }
            gemm(out, &at, false, b, true, m, k, n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], ta: bool, b: &[f32], tb: bool, m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av as f64 * bv as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.1).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut out = vec![0.0f32; m * n];
                gemm(&mut out, &a, ta, &b, tb, m, k, n);
                let want = naive(&a, ta, &b, tb, m, k, n);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5, "{ta} {tb}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn gather_backward_scatters() {
        let mut tape: Tape = Tape::new();
        let x = tape.param(&Grid::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let idx: Arc<[u32]> = Arc::from(vec![2u32, 2, GATHER_ZERO, 0]);
        let y = tape.gather(x, idx, &[4]).unwrap();
        assert_eq!(tape.value(y), &[3.0, 3.0, 0.0, 1.0]);
        let s = tape.sum_sq(y);
        let g = tape.backward(s, &[1.0]).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 0.0, 12.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape: Tape = Tape::new();
        let x = tape.param(&Grid::new(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(&Grid::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_sq(y);
        let g = tape.backward(s, &[1.0]).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[18.0, 64.0]);
    }

    #[test]
    fn fused_attention_matches_composition() {
        let mut rng = crate::rng::SeededRng::new(5);
        let (c, n) = (3, 7);
        let mk = |rng: &mut crate::rng::SeededRng| Grid::new(&[c, n], rng.normals(c * n)).unwrap();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let w = mk(&mut rng);
        let run = |fused: bool| {
            let mut tape: Tape<f64> = Tape::new();
            let (qv, kv, vv) = (tape.param(&q), tape.param(&k), tape.param(&v));
            let out = if fused {
                tape.attention(qv, kv, vv).unwrap()
            } else {
                let s = tape.matmul(qv, true, kv, false).unwrap();
                let p = tape.softmax_rows(s);
                tape.matmul(vv, false, p, true).unwrap()
            };
            let wv = tape.constant(&w);
            let y = tape.mul(out, wv).unwrap();
            let l = tape.sum_sq(y);
            let g = tape.backward(l, &[1.0]).unwrap();
            let mut all = tape.value(out).to_vec();
            for x in [qv, kv, vv] {
                all.extend_from_slice(g.get(x).unwrap());
            }
            all
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}
