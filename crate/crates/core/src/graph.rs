//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation order.
//! Because inputs always precede outputs on the tape, [`Graph::backward`] can
//! walk the tape once in reverse and accumulate gradients without a
//! topological sort. Gradients are kept only for leaves created with
//! `requires_grad`; intermediate gradients are dropped as soon as they have
//! been propagated.
//!
//! The primitive set is exactly what the transformer needs: dense products,
//! layer normalisation, GELU, softmax, fused multi-head attention, token
//! assembly and the two training losses.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms in [`Graph::bce_loss`].
pub const PROB_EPS: f32 = 1e-7;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        qkv: Var,
        heads: usize,
        /// Post-softmax weights, `[batch, heads, tokens, tokens]`.
        probs: Vec<f32>,
    },
    EmbedTokens {
        patches: Var,
        cls: Var,
        pos: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    BceLoss {
        scores: Var,
        labels: Vec<f32>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Grads = Vec<Option<Vec<f32>>>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// Adds a leaf; gradients are accumulated for it iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Post-softmax attention weights recorded by [`attention`](Self::attention),
    /// laid out `[batch, heads, tokens, tokens]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Plain 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), (k, 1), self.data(b), (n, 1), 0.0, &mut out, (n, 1));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    /// Affine map over the last dimension: `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let inp = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != inp {
            return Err(Error::shape("linear", sx, sw));
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            inp,
            out_dim,
            1.0,
            self.data(x),
            (inp, 1),
            self.data(w),
            (out_dim, 1),
            beta,
            &mut out,
            (out_dim, 1),
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), tracked))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), tracked)
    }

    /// Normalises each row of the last dimension to zero mean and unit
    /// variance (biased estimator, `eps` added to the variance), then applies
    /// `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0f32; xs.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x), tracked)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = self.data(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, tracked))
    }

    /// Scaled dot-product multi-head self-attention over a fused projection.
    ///
    /// `qkv` is `[batch, tokens, 3·dim]` with each token laid out as
    /// `q | k | v`, and head `h` owning columns `h·dim/heads..(h+1)·dim/heads`
    /// of each block. Returns the concatenated head outputs `[batch, tokens, dim]`;
    /// the attention weights stay on the tape (see [`attention_weights`](Self::attention_weights)).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || shape[2] % 3 != 0 || heads == 0 || (shape[2] / 3) % heads != 0 {
            return Err(Error::shape("attention", &shape, &[heads]));
        }
        let (batch, t, d3) = (shape[0], shape[1], shape[2]);
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.data(qkv);
        let mut probs = vec![0.0f32; batch * heads * t * t];
        let mut out = vec![0.0f32; batch * t * d];
        for b in 0..batch {
            let base = b * t * d3;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                let q = &src[base + h * dh..];
                let k = &src[base + d + h * dh..];
                let v = &src[base + 2 * d + h * dh..];
                gemm(t, dh, t, scale, q, (d3, 1), k, (1, d3), 0.0, p, (t, 1));
                for row in p.chunks_exact_mut(t) {
                    softmax_in_place(row);
                }
                gemm(t, t, dh, 1.0, p, (t, 1), v, (d3, 1), 0.0, &mut out[b * t * d + h * dh..], (d, 1));
            }
        }
        let tracked = self.tracked(qkv);
        Ok(self.push(
            Tensor::from_parts(vec![batch, t, d], out),
            Op::Attention { qkv, heads, probs },
            tracked,
        ))
    }

    /// Assembles a token sequence: `[cls; patch tokens] + positional`.
    ///
    /// `patches: [batch, M, dim]`, `cls: [dim]`, `pos: [M + 1, dim]`.
    pub fn embed_tokens(&mut self, patches: Var, cls: Var, pos: Var) -> Result<Var> {
        let sp = self.shape(patches).to_vec();
        if sp.len() != 3 {
            return Err(Error::shape("embed_tokens", &sp, self.shape(pos)));
        }
        let (batch, m, d) = (sp[0], sp[1], sp[2]);
        if self.shape(cls) != [d] || self.shape(pos) != [m + 1, d] {
            return Err(Error::shape("embed_tokens", &sp, self.shape(pos)));
        }
        let t = m + 1;
        let (pd, cd, pe) = (self.data(patches), self.data(cls), self.data(pos));
        let mut out = vec![0.0f32; batch * t * d];
        for b in 0..batch {
            let dst = &mut out[b * t * d..(b + 1) * t * d];
            for j in 0..d {
                dst[j] = cd[j] + pe[j];
            }
            let src = &pd[b * m * d..(b + 1) * m * d];
            for (i, (o, s)) in dst[d..].iter_mut().zip(src).enumerate() {
                *o = s + pe[d + i];
            }
        }
        let tracked = self.tracked(patches) || self.tracked(cls) || self.tracked(pos);
        Ok(self.push(
            Tensor::from_parts(vec![batch, t, d], out),
            Op::EmbedTokens { patches, cls, pos },
            tracked,
        ))
    }

    /// Picks token `index` out of every sequence: `[batch, T, dim] → [batch, dim]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select_token", &s, &[index]));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&src[(b * t + index) * d..][..d]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![batch, d], out), Op::SelectToken { x, index }, tracked))
    }

    /// Mean binary cross-entropy of probabilities `scores` against 0/1 labels.
    /// Scores are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the logarithm.
    pub fn bce_loss(&mut self, scores: Var, labels: &[f32]) -> Result<Var> {
        let s = self.data(scores);
        if s.len() != labels.len() || s.is_empty() {
            return Err(Error::shape("bce_loss", self.shape(scores), &[labels.len()]));
        }
        let total: f64 = s
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce(p, y) as f64)
            .sum();
        let loss = (total / s.len() as f64) as f32;
        let tracked = self.tracked(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLoss {
                scores,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (batch, classes) = match s.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(Error::shape("softmax_ce_loss", &s, &[labels.len()])),
        };
        if labels.len() != batch {
            return Err(Error::shape("softmax_ce_loss", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0f32; z.len()];
        let mut total = 0.0f64;
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += (lse - row[labels[b]]) as f64;
            for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar((total / batch as f64) as f32),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Back-propagates from a one-element node, storing gradients on every
    /// tracked leaf. Calling it again recomputes them from scratch.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward target must be a scalar, got shape {:?}",
                self.shape(target)
            )));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        let mut grads: Grads = vec![None; target.0 + 1];
        grads[target.0] = Some(vec![1.0]);
        for i in (0..=target.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(gy);
            }
        }
        Ok(())
    }

    /// Returns a zero-initialised gradient buffer for `v`, or `None` if `v`
    /// does not need one.
    fn slot<'g>(&self, grads: &'g mut Grads, v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, gy: &[f32], grads: &mut Grads) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, 1.0, gy, (n, 1), self.data(*b), (1, n), 1.0, da, (k, 1));
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, 1.0, self.data(*a), (1, k), gy, (n, 1), 1.0, db, (n, 1));
                }
            }
            Op::Linear { x, w, b } => {
                let (inp, out) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = gy.len() / out;
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(rows, out, inp, 1.0, gy, (out, 1), self.data(*w), (1, out), 1.0, dx, (inp, 1));
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(inp, rows, out, 1.0, self.data(*x), (1, inp), gy, (out, 1), 1.0, dw, (out, 1));
                }
                if let Some(db) = b.and_then(|b| self.slot(grads, b)) {
                    for row in gy.chunks_exact(out) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.data(*b);
                    for ((d, g), y) in da.iter_mut().zip(gy).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.data(*a);
                    for ((d, g), x) in db.iter_mut().zip(gy).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let g = self.data(*gamma);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (gr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for gr in gy.chunks_exact(d) {
                        dbeta.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = 1.0 / d as f32;
                    for (r, (gr, hr)) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let rs = rstd[r];
                        let dst = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            dst[j] += rs * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let xs = self.data(*x);
                    for ((d, g), &v) in dx.iter_mut().zip(gy).zip(xs) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let ys = node.value.data();
                    for ((d, g), &y) in dx.iter_mut().zip(gy).zip(ys) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let ys = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f32 = (0..len).map(|j| gy[idx(j)] * ys[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] += ys[idx(j)] * (gy[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let Some(dqkv) = self.slot(grads, *qkv) else { return };
                let s = self.shape(*qkv);
                let (batch, t, d3) = (s[0], s[1], s[2]);
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let src = self.data(*qkv);
                let mut dp = vec![0.0f32; t * t];
                for b in 0..batch {
                    let base = b * t * d3;
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * t * t..][..t * t];
                        let go = &gy[b * t * d + h * dh..];
                        let q = &src[base + h * dh..];
                        let k = &src[base + d + h * dh..];
                        let v = &src[base + 2 * d + h * dh..];
                        // dP = dO·Vᵀ
                        gemm(t, dh, t, 1.0, go, (d, 1), v, (1, d3), 0.0, &mut dp, (t, 1));
                        // dV += Pᵀ·dO
                        gemm(t, t, dh, 1.0, p, (1, t), go, (d, 1), 1.0, &mut dqkv[base + 2 * d + h * dh..], (d3, 1));
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the 1/√dh scale
                        for (dr, pr) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                            let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        // dQ += dS·K, dK += dSᵀ·Q
                        gemm(t, t, dh, 1.0, &dp, (t, 1), k, (d3, 1), 1.0, &mut dqkv[base + h * dh..], (d3, 1));
                        gemm(t, t, dh, 1.0, &dp, (1, t), q, (d3, 1), 1.0, &mut dqkv[base + d + h * dh..], (d3, 1));
                    }
                }
            }
            Op::EmbedTokens { patches, cls, pos } => {
                let s = node.value.shape();
                let (batch, t, d) = (s[0], s[1], s[2]);
                if let Some(dp) = self.slot(grads, *patches) {
                    for b in 0..batch {
                        let src = &gy[(b * t + 1) * d..(b + 1) * t * d];
                        dp[b * (t - 1) * d..(b + 1) * (t - 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, g)| *x += g);
                    }
                }
                if let Some(dc) = self.slot(grads, *cls) {
                    for b in 0..batch {
                        dc.iter_mut().zip(&gy[b * t * d..][..d]).for_each(|(x, g)| *x += g);
                    }
                }
                if let Some(dpos) = self.slot(grads, *pos) {
                    for seq in gy.chunks_exact(t * d) {
                        dpos.iter_mut().zip(seq).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::SelectToken { x, index } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = self.shape(*x);
                    let (t, d) = (s[1], s[2]);
                    for (b, g) in gy.chunks_exact(d).enumerate() {
                        dx[(b * t + index) * d..][..d]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::BceLoss { scores, labels } => {
                if let Some(ds) = self.slot(grads, *scores) {
                    let n = labels.len() as f32;
                    let s = self.data(*scores);
                    for ((d, &p), &y) in ds.iter_mut().zip(s).zip(labels) {
                        // Straight-through clamp: the derivative is evaluated
                        // at the clamped probability so saturated mistakes
                        // still receive a gradient.
                        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        *d += gy[0] * (pc - y) / (pc * (1.0 - pc)) / n;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                if let Some(dz) = self.slot(grads, *logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = gy[0] / batch as f32;
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dz[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a single probability against a 0/1 label.
pub fn bce(p: f32, y: f32) -> f32 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
