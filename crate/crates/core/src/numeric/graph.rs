//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value plus whatever it
//! needs for the backward rule. Since inputs always precede outputs,
//! walking the nodes in reverse append order is a valid topological order.

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, ConvGeom};
use crate::numeric::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleBy { a: Var, s: Var },
    Exp { a: Var },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Attention(Box<AttentionSaved>),
    AppendToken { x: Var, tok: Var, batch: usize, tokens: usize, dim: usize },
    SliceTokens { x: Var, start: usize, len: usize, batch: usize, tokens: usize, dim: usize },
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64>, geom: ConvGeom, batch: usize, out_ch: usize },
    AvgPool2 { x: Var, batch: usize, channels: usize, height: usize, width: usize },
    EmbeddingMean { table: Var, tokens: Vec<Vec<usize>> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    MaskedBce { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    DiagCrossEntropy { logits: Var, n: usize, row_probs: Vec<f64>, col_probs: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct AttentionSaved {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub probs: Vec<f64>,
}

/// A computation tape. Build one per forward pass; it owns copies of the
/// parameters it reads, so trained weights stay immutable.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) values: Vec<Tensor>,
    pub(crate) ops: Vec<Op>,
    pub(crate) requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub(crate) fn push(&mut self, t: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(t);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub(crate) fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    /// Propagates `d loss / d node` to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, dy: &[f64]) {
        let Graph { values, ops, requires, grads } = self;
        let values: &[Tensor] = values;
        let requires: &[bool] = requires;
        // Inputs always precede the node being processed, so their
        // gradient slots never alias `dy`.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if requires[v.0] {
                f(grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].len()]));
            }
        };
        let val = |v: Var| values[v.0].data();
        let out = values[idx].data();

        match &ops[idx] {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                with(a, &mut |ga| kernels::gemm(m, n, k, dy, false, val(b), true, ga, 1.0));
                with(b, &mut |gb| kernels::gemm(k, m, n, val(a), true, dy, false, gb, 1.0));
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                with(*a, &mut |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += dy[j * rows + i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b, rows, inp, out: o } => {
                let (rows, inp, o) = (*rows, *inp, *o);
                with(*x, &mut |gx| kernels::gemm(rows, o, inp, dy, false, val(*w), true, gx, 1.0));
                with(*w, &mut |gw| kernels::gemm(inp, rows, o, val(*x), true, dy, false, gw, 1.0));
                if let Some(b) = b {
                    with(*b, &mut |gb| {
                        for r in dy.chunks_exact(o) {
                            for (g, d) in gb.iter_mut().zip(r) {
                                *g += d;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                with(*a, &mut |g| add_into(g, dy));
                with(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub { a, b } => {
                with(*a, &mut |g| add_into(g, dy));
                with(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                with(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                with(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                with(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
            }
            Op::ScaleBy { a, s } => {
                let sv = val(*s)[0];
                let av = val(*a);
                with(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += sv * d));
                with(*s, &mut |g| g[0] += av.iter().zip(dy).map(|(x, d)| x * d).sum::<f64>());
            }
            Op::Exp { a } => {
                with(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * out[i];
                    }
                });
            }
            Op::Reshape { a } => with(*a, &mut |g| add_into(g, dy)),
            Op::Sum { a } => with(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean { a } => {
                let n = val(*a).len() as f64;
                with(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma);
                let d = gam.len();
                with(*gamma, &mut |g| {
                    for (r, dr) in xhat.chunks_exact(d).zip(dy.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * r[j];
                        }
                    }
                });
                with(*beta, &mut |g| {
                    for dr in dy.chunks_exact(d) {
                        add_into(g, dr);
                    }
                });
                with(*x, &mut |g| {
                    let mut dxhat = vec![0.0; d];
                    for (row, ((gr, dr), xr)) in g
                        .chunks_exact_mut(d)
                        .zip(dy.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = dr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let scale = inv_std[row] / d as f64;
                        for j in 0..d {
                            gr[j] += scale * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = val(*a);
                with(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Sigmoid { a } => {
                with(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Softmax { a } => {
                let d = values[idx].last_dim();
                with(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(out.chunks_exact(d)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                with(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * mask[i];
                    }
                });
            }
            Op::Attention(s) => attention_backward(s, dy, values, &mut with),
            Op::AppendToken { x, tok, batch, tokens, dim } => {
                let (batch, tokens, dim) = (*batch, *tokens, *dim);
                let stride = (tokens + 1) * dim;
                with(*x, &mut |g| {
                    for b in 0..batch {
                        add_into(&mut g[b * tokens * dim..(b + 1) * tokens * dim], &dy[b * stride..b * stride + tokens * dim]);
                    }
                });
                with(*tok, &mut |g| {
                    for b in 0..batch {
                        add_into(g, &dy[b * stride + tokens * dim..(b + 1) * stride]);
                    }
                });
            }
            Op::SliceTokens { x, start, len, batch, tokens, dim } => {
                let (start, len, batch, tokens, dim) = (*start, *len, *batch, *tokens, *dim);
                with(*x, &mut |g| {
                    for b in 0..batch {
                        let src = &dy[b * len * dim..(b + 1) * len * dim];
                        let dst = &mut g[(b * tokens + start) * dim..(b * tokens + start + len) * dim];
                        add_into(dst, src);
                    }
                });
            }
            Op::Conv2d { x, w, b, cols, geom, batch, out_ch } => {
                let (geom, batch, o) = (*geom, *batch, *out_ch);
                let (patch, hw) = (geom.patch(), geom.pixels());
                let out_sz = o * hw;
                with(*b, &mut |g| {
                    for img in dy.chunks_exact(out_sz) {
                        for (c, row) in img.chunks_exact(hw).enumerate() {
                            g[c] += row.iter().sum::<f64>();
                        }
                    }
                });
                with(*w, &mut |g| {
                    for i in 0..batch {
                        let dyi = &dy[i * out_sz..(i + 1) * out_sz];
                        let ci = &cols[i * patch * hw..(i + 1) * patch * hw];
                        kernels::gemm(o, hw, patch, dyi, false, ci, true, g, 1.0);
                    }
                });
                let wv = val(*w);
                with(*x, &mut |g| {
                    let mut dcols = vec![0.0; patch * hw];
                    let in_sz = geom.channels * hw;
                    for i in 0..batch {
                        let dyi = &dy[i * out_sz..(i + 1) * out_sz];
                        kernels::gemm(patch, o, hw, wv, true, dyi, false, &mut dcols, 0.0);
                        kernels::col2im_add(&dcols, geom, &mut g[i * in_sz..(i + 1) * in_sz]);
                    }
                });
            }
            Op::AvgPool2 { x, batch, channels, height, width } => {
                let (planes, h, w) = (*batch * *channels, *height, *width);
                let (oh, ow) = (h / 2, w / 2);
                with(*x, &mut |g| {
                    for p in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let d = dy[(p * oh + y) * ow + xx] * 0.25;
                                let base = p * h * w + 2 * y * w + 2 * xx;
                                g[base] += d;
                                g[base + 1] += d;
                                g[base + w] += d;
                                g[base + w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::EmbeddingMean { table, tokens } => {
                let e = values[idx].last_dim();
                with(*table, &mut |g| {
                    for (row, toks) in tokens.iter().enumerate() {
                        let inv = 1.0 / toks.len() as f64;
                        let dr = &dy[row * e..(row + 1) * e];
                        for &t in toks {
                            for j in 0..e {
                                g[t * e + j] += dr[j] * inv;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = values[idx].last_dim();
                with(*x, &mut |g| {
                    for (r, ((gr, dr), yr)) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(out.chunks_exact(d)).enumerate() {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += (dr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let n = p.len() as f64;
                with(*pred, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[0] * 2.0 * (p[i] - target[i]) / n;
                    }
                });
            }
            Op::MaskedBce { pred, target, mask, count } => {
                let p = val(*pred);
                let n = *count as f64;
                with(*pred, &mut |g| {
                    for i in 0..g.len() {
                        if !mask[i] || p[i] < BCE_CLAMP || p[i] > 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let t = target[i];
                        g[i] += dy[0] * (-t / p[i] + (1.0 - t) / (1.0 - p[i])) / n;
                    }
                });
            }
            Op::DiagCrossEntropy { logits, n, row_probs, col_probs } => {
                let n = *n;
                let scale = 0.5 * dy[0] / n as f64;
                with(*logits, &mut |g| {
                    for i in 0..n {
                        for j in 0..n {
                            let eye = if i == j { 1.0 } else { 0.0 };
                            g[i * n + j] += scale * ((row_probs[i * n + j] - eye) + (col_probs[i * n + j] - eye));
                        }
                    }
                });
            }
        }
    }
}

/// Lower/upper clamp applied to probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn attention_backward(s: &AttentionSaved, dy: &[f64], values: &[Tensor], with: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
    let (bsz, t, d, h) = (s.batch, s.tokens, s.dim, s.heads);
    let hd = d / h;
    let scale = 1.0 / (hd as f64).sqrt();
    let (q, k, v) = (values[s.q.0].data(), values[s.k.0].data(), values[s.v.0].data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..bsz {
        for head in 0..h {
            let off = head * hd;
            for i in 0..t {
                let p = &s.probs[((b * h + head) * t + i) * t..((b * h + head) * t + i + 1) * t];
                let dyi = &dy[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                let mut dot = 0.0;
                for j in 0..t {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += dyi[c] * vj[c];
                    }
                    dp[j] = acc;
                    dot += p[j] * acc;
                    let dvj = &mut dv[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                    for c in 0..hd {
                        dvj[c] += p[j] * dyi[c];
                    }
                }
                let qi = (b * t + i) * d + off;
                for j in 0..t {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = (b * t + j) * d + off;
                    for c in 0..hd {
                        dq[qi + c] += ds * k[kj + c];
                        dk[kj + c] += ds * q[qi + c];
                    }
                }
            }
        }
    }
    with(s.q, &mut |g| add_into(g, &dq));
    with(s.k, &mut |g| add_into(g, &dk));
    with(s.v, &mut |g| add_into(g, &dv));
}
