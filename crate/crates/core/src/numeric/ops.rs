//! Forward definitions of the differentiable ops. The matching backward
//! rules live next to the tape in `graph.rs`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::graph::{AttentionSaved, Graph, Op, Var, BCE_CLAMP};
use crate::numeric::kernels::{self, ConvGeom};
use crate::numeric::tensor::Tensor;

/// Default epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let req = self.requires_grad(a);
        self.push(out, op, req)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let req = self.any_requires(&[a, b]);
        self.push(out, op, req)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut c, 0.0);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul { a, b, m, k, n }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let req = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], data), Op::Transpose { a, rows, cols }, req))
    }

    /// Dense layer over the last axis: `x[..., in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != inp {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in y.chunks_exact_mut(out) {
                r.copy_from_slice(bias);
            }
        }
        kernels::gemm(rows, inp, out, self.value(x).data(), false, self.value(w).data(), false, &mut y, if b.is_some() { 1.0 } else { 0.0 });
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let req = self.any_requires(&deps);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b, rows, inp, out }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale { a, c }, |x| c * x)
    }

    /// Multiplies `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(s), &[1]));
        }
        let sv = self.value(s).item();
        let req = self.any_requires(&[a, s]);
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| sv * x).collect());
        Ok(self.push(out, Op::ScaleBy { a, s }, req))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp { a }, f64::exp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let req = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape { a }, req))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let req = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let req = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, req)
    }

    /// Normalizes every last-axis slice to zero mean / unit variance, then
    /// applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, req))
    }

    /// `x·Φ(x)` via the tanh approximation
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu { a }, kernels::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid { a }, kernels::sigmoid)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut y = t.data().to_vec();
        for row in y.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        let req = self.requires_grad(a);
        self.push(out, Op::Softmax { a }, req)
    }

    /// Inverted dropout. Outside training (or at rate 0) this returns `a`
    /// itself, so evaluation is an exact identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let req = self.requires_grad(a);
        Ok(self.push(out, Op::Dropout { a, mask }, req))
    }

    /// Scaled dot-product self-attention core over `[batch, tokens, dim]`
    /// inputs split into `heads` heads. `key_mask[b·tokens + j]` marks the
    /// tokens that may be attended to; masked keys get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("model dim {d} is not divisible by {heads} heads")));
        }
        if key_mask.len() != bsz * t {
            return Err(Error::dim("attention mask", &[key_mask.len()], &[bsz, t]));
        }
        for b in 0..bsz {
            if !key_mask[b * t..(b + 1) * t].iter().any(|&m| m) {
                return Err(Error::Contract(format!("attention row {b} has no unmasked tokens")));
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bsz * heads * t * t];
        let mut out = vec![0.0; bsz * t * d];
        for b in 0..bsz {
            let mask = &key_mask[b * t..(b + 1) * t];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..t {
                    let p = &mut probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                    let qi = &qv[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if !mask[j] {
                            continue;
                        }
                        let kj = &kv[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        if mask[j] {
                            p[j] = (p[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let o = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                    for j in 0..t {
                        if !mask[j] {
                            continue;
                        }
                        p[j] /= z;
                        let vj = &vv[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                        for c in 0..hd {
                            o[c] += p[j] * vj[c];
                        }
                    }
                }
            }
        }
        let req = self.any_requires(&[q, k, v]);
        let saved = AttentionSaved { q, k, v, batch: bsz, tokens: t, dim: d, heads, probs };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Attention(Box::new(saved)), req))
    }

    /// Appends the vector `tok[dim]` as an extra token to every row of
    /// `x[batch, tokens, dim]`.
    pub fn append_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(tok) != [s[2]] {
            return Err(Error::dim("append_token", &s, self.shape(tok)));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let (xv, tv) = (self.value(x).data(), self.value(tok).data());
        let mut out = Vec::with_capacity(batch * (tokens + 1) * dim);
        for b in 0..batch {
            out.extend_from_slice(&xv[b * tokens * dim..(b + 1) * tokens * dim]);
            out.extend_from_slice(tv);
        }
        let req = self.any_requires(&[x, tok]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, tokens + 1, dim], out),
            Op::AppendToken { x, tok, batch, tokens, dim },
            req,
        ))
    }

    /// Tokens `start..start+len` of `x[batch, tokens, dim]`.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_tokens", &s, &[start, len]));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * dim);
        for b in 0..batch {
            out.extend_from_slice(&xv[(b * tokens + start) * dim..(b * tokens + start + len) * dim]);
        }
        let req = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch, len, dim], out),
            Op::SliceTokens { x, start, len, batch, tokens, dim },
            req,
        ))
    }

    /// Stride-1 "same" convolution: `x[B, C, H, W]`, `w[O, C, k, k]` with odd
    /// `k`, `b[O]` → `[B, O, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        if self.shape(b) != [out_ch] {
            return Err(Error::dim("conv2d bias", self.shape(b), &[out_ch]));
        }
        let geom = ConvGeom { channels: sx[1], height: sx[2], width: sx[3], kernel: sw[2] };
        let (patch, hw) = (geom.patch(), geom.pixels());
        let in_sz = geom.channels * hw;
        let xv = self.value(x).data();
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut cols = vec![0.0; batch * patch * hw];
        let mut out = vec![0.0; batch * out_ch * hw];
        for i in 0..batch {
            let ci = &mut cols[i * patch * hw..(i + 1) * patch * hw];
            kernels::im2col(&xv[i * in_sz..(i + 1) * in_sz], geom, ci);
            let oi = &mut out[i * out_ch * hw..(i + 1) * out_ch * hw];
            for (c, row) in oi.chunks_exact_mut(hw).enumerate() {
                row.fill(bv[c]);
            }
            kernels::gemm(out_ch, patch, hw, wv, false, ci, false, oi, 1.0);
        }
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, out_ch, sx[2], sx[3]], out),
            Op::Conv2d { x, w, b, cols, geom, batch, out_ch },
            req,
        ))
    }

    /// 2×2 average pooling over `[B, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::dim("avg_pool2", &s, &[]));
        }
        let (batch, channels, height, width) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (height / 2, width / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * channels * oh * ow];
        for p in 0..batch * channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * height * width + 2 * y * width + 2 * xx;
                    out[(p * oh + y) * ow + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + width] + xv[base + width + 1]);
                }
            }
        }
        let req = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch, channels, oh, ow], out),
            Op::AvgPool2 { x, batch, channels, height, width },
            req,
        ))
    }

    /// Mean of the embedding rows selected by each token list.
    pub fn embedding_mean(&mut self, table: Var, tokens: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding_mean", &s, &[]));
        }
        let (vocab, e) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = vec![0.0; tokens.len() * e];
        for (row, toks) in tokens.iter().enumerate() {
            if toks.is_empty() {
                return Err(Error::Contract(format!("token list {row} is empty")));
            }
            let inv = 1.0 / toks.len() as f64;
            for &t in toks {
                if t >= vocab {
                    return Err(Error::Parameter(format!("token id {t} outside vocabulary of {vocab}")));
                }
                for j in 0..e {
                    out[row * e + j] += tv[t * e + j] * inv;
                }
            }
        }
        let req = self.requires_grad(table);
        Ok(self.push(
            Tensor::from_parts(vec![tokens.len(), e], out),
            Op::EmbeddingMean { table, tokens: tokens.to_vec() },
            req,
        ))
    }

    /// Scales every last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut norms = Vec::with_capacity(t.len() / d);
        let mut y = t.data().to_vec();
        for row in y.chunks_exact_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        let req = self.requires_grad(x);
        self.push(out, Op::L2Normalize { x, norms }, req)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::dim("mse", self.shape(pred), &[target.len()]));
        }
        let l = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let req = self.requires_grad(pred);
        Ok(self.push(Tensor::scalar(l), Op::Mse { pred, target: target.to_vec() }, req))
    }

    /// Binary cross-entropy on probabilities, averaged over the entries
    /// where `mask` is set. Probabilities are clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn masked_bce(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(Error::dim("masked_bce", self.shape(pred), &[target.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("binary cross-entropy over zero unmasked items".into()));
        }
        let l = bce_sum(p, target, mask) / count as f64;
        let req = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(l),
            Op::MaskedBce { pred, target: target.to_vec(), mask: mask.to_vec(), count },
            req,
        ))
    }

    /// Symmetric cross-entropy of a square logit matrix whose matching
    /// pairs sit on the main diagonal: mean of the row-wise and the
    /// column-wise softmax losses.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("diag_cross_entropy", &s, &[]));
        }
        let n = s[0];
        let lv = self.value(logits).data();
        let mut row_probs = lv.to_vec();
        for row in row_probs.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let mut col_probs = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = lv[i * n + j];
            }
            softmax_in_place(&mut col);
            for i in 0..n {
                col_probs[i * n + j] = col[i];
            }
        }
        let mut loss = 0.0;
        for i in 0..n {
            loss -= row_probs[i * n + i].max(f64::MIN_POSITIVE).ln() + col_probs[i * n + i].max(f64::MIN_POSITIVE).ln();
        }
        loss *= 0.5 / n as f64;
        let req = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::DiagCrossEntropy { logits, n, row_probs, col_probs }, req))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Summed clamped binary cross-entropy over the masked entries.
pub fn bce_sum(p: &[f64], target: &[f64], mask: &[bool]) -> f64 {
    let mut l = 0.0;
    for i in 0..p.len() {
        if mask[i] {
            let q = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            l -= target[i] * q.ln() + (1.0 - target[i]) * (1.0 - q).ln();
        }
    }
    l
}
