use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BatchedOutfits, VictorConfig};
use crate::error::{Error, Result};
use crate::flip::FeatureCache;
use crate::numeric::{Bound, Graph, ParamId, ParamSet, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    in_w: ParamId,
    in_b: ParamId,
    reg: ParamId,
    layers: Vec<LayerIds>,
    ocr_ln_g: ParamId,
    ocr_ln_b: ParamId,
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
    mid_ln_g: ParamId,
    mid_ln_b: ParamId,
    wi: ParamId,
    bi: ParamId,
}

#[derive(Debug, Clone)]
pub struct VictorModel {
    pub config: VictorConfig,
    pub params: ParamSet,
    ids: Ids,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `[batch]`.
    pub y_ocr: Var,
    /// `[batch, tokens]`; padded entries are defined but meaningless.
    pub y_mid: Var,
}

fn dense<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut R) -> (ParamId, ParamId) {
    (
        ps.add(format!("{name}.weight"), Tensor::xavier_uniform(&[inp, out], inp, out, rng)),
        ps.add(format!("{name}.bias"), Tensor::zeros(&[out])),
    )
}

fn norm(ps: &mut ParamSet, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        ps.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
        ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    )
}

impl VictorModel {
    /// Xavier-uniform dense weights, `N(0, 0.02)` REG token, unit layer-norm
    /// gains and zero biases.
    pub fn new<R: Rng + ?Sized>(config: VictorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut ps = ParamSet::new();
        let (in_w, in_b) = dense(&mut ps, "input_proj", config.input_dim(), d, rng);
        let reg = ps.add("reg_token", Tensor::normal(&[d], 0.02, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("decoder.{l}");
            let (ln1_g, ln1_b) = norm(&mut ps, &format!("{p}.ln1"), d);
            let (wq, bq) = dense(&mut ps, &format!("{p}.attn.q"), d, d, rng);
            let (wk, bk) = dense(&mut ps, &format!("{p}.attn.k"), d, d, rng);
            let (wv, bv) = dense(&mut ps, &format!("{p}.attn.v"), d, d, rng);
            let (wo, bo) = dense(&mut ps, &format!("{p}.attn.out"), d, d, rng);
            let (ln2_g, ln2_b) = norm(&mut ps, &format!("{p}.ln2"), d);
            let (w1, b1) = dense(&mut ps, &format!("{p}.ffn.1"), d, config.ffn_dim(), rng);
            let (w2, b2) = dense(&mut ps, &format!("{p}.ffn.2"), config.ffn_dim(), d, rng);
            layers.push(LayerIds { ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        let (ocr_ln_g, ocr_ln_b) = norm(&mut ps, "ocr_head.ln", d);
        let (w0, b0) = dense(&mut ps, "ocr_head.w0", d, config.ocr_hidden(), rng);
        let (w1, b1) = dense(&mut ps, "ocr_head.w1", config.ocr_hidden(), 1, rng);
        let (mid_ln_g, mid_ln_b) = norm(&mut ps, "mid_head.ln", d);
        let (wi, bi) = dense(&mut ps, "mid_head.wi", d, 1, rng);
        let ids = Ids { in_w, in_b, reg, layers, ocr_ln_g, ocr_ln_b, w0, b0, w1, b1, mid_ln_g, mid_ln_b, wi, bi };
        Ok(Self { config, params: ps, ids })
    }

    pub fn from_params(config: VictorConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        crate::flip::check_layout(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path, serde_json::json!({ "victor": self.config }))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let (params, meta) = ParamSet::load(path)?;
        let config: VictorConfig = serde_json::from_value(meta.get("victor").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: format!("victor config: {e}") })?;
        Self::from_params(config, params)
    }

    /// SHA-256 of the serialized model file.
    pub fn hash(&self) -> String {
        let bytes = self.params.to_bytes(serde_json::json!({ "victor": self.config })).expect("serializable");
        hex::encode(Sha256::digest(bytes))
    }

    /// Zeroes the last weight and bias of both heads, so every output is 0.5.
    pub fn zero_heads(&mut self) {
        for id in [self.ids.w1, self.ids.b1, self.ids.wi, self.ids.bi] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Decoder stack and both heads. `rng` drives dropout in training mode.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, batch: &BatchedOutfits, training: bool, rng: &mut R) -> Result<Outputs> {
        let cfg = &self.config;
        if batch.in_dim != cfg.input_dim() {
            return Err(Error::dim("victor input", &[batch.in_dim], &[cfg.input_dim()]));
        }
        if batch.tokens > cfg.max_items {
            return Err(Error::Contract(format!("batch holds {} item slots, max_items is {}", batch.tokens, cfg.max_items)));
        }
        for b in 0..batch.batch {
            if batch.items(b) == 0 {
                return Err(Error::Contract(format!("batch row {b} is entirely padding")));
            }
        }
        let (bsz, t) = (batch.batch, batch.tokens);
        let ids = &self.ids;
        let feats = g.constant(batch.features.clone());
        let x = g.linear(feats, p[ids.in_w], Some(p[ids.in_b]))?;
        let mut x = g.append_token(x, p[ids.reg])?;
        let mut mask = Vec::with_capacity(bsz * (t + 1));
        for b in 0..bsz {
            mask.extend_from_slice(&batch.pad_mask[b * t..(b + 1) * t]);
            mask.push(true);
        }
        for l in &ids.layers {
            let y = g.layer_norm(x, p[l.ln1_g], p[l.ln1_b], LAYER_NORM_EPS)?;
            let q = g.linear(y, p[l.wq], Some(p[l.bq]))?;
            let k = g.linear(y, p[l.wk], Some(p[l.bk]))?;
            let v = g.linear(y, p[l.wv], Some(p[l.bv]))?;
            let a = g.attention(q, k, v, &mask, cfg.heads)?;
            let a = g.linear(a, p[l.wo], Some(p[l.bo]))?;
            let a = g.dropout(a, cfg.dropout, training, rng)?;
            x = g.add(x, a)?;
            let y = g.layer_norm(x, p[l.ln2_g], p[l.ln2_b], LAYER_NORM_EPS)?;
            let f = g.linear(y, p[l.w1], Some(p[l.b1]))?;
            let f = g.gelu(f);
            let f = g.linear(f, p[l.w2], Some(p[l.b2]))?;
            let f = g.dropout(f, cfg.dropout, training, rng)?;
            x = g.add(x, f)?;
        }
        let reg = g.slice_tokens(x, t, 1)?;
        let r = g.layer_norm(reg, p[ids.ocr_ln_g], p[ids.ocr_ln_b], LAYER_NORM_EPS)?;
        let r = g.linear(r, p[ids.w0], Some(p[ids.b0]))?;
        let r = g.gelu(r);
        let r = g.linear(r, p[ids.w1], Some(p[ids.b1]))?;
        let r = g.sigmoid(r);
        let y_ocr = g.reshape(r, &[bsz])?;

        let items = g.slice_tokens(x, 0, t)?;
        let m = g.layer_norm(items, p[ids.mid_ln_g], p[ids.mid_ln_b], LAYER_NORM_EPS)?;
        let m = g.gelu(m);
        let m = g.linear(m, p[ids.wi], Some(p[ids.bi]))?;
        let m = g.sigmoid(m);
        let y_mid = g.reshape(m, &[bsz, t])?;
        Ok(Outputs { y_ocr, y_mid })
    }

    /// Eval-mode outputs as plain vectors: `y_ocr[b]` and the first `n_b`
    /// item probabilities of each row.
    pub fn predict(&self, batch: &BatchedOutfits) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = self.params.attach(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &p, batch, false, &mut rng)?;
        let y_ocr = g.value(out.y_ocr).data().to_vec();
        let ym = g.value(out.y_mid).data();
        let t = batch.tokens;
        let y_mid = (0..batch.batch)
            .map(|b| (0..t).filter(|&i| batch.pad_mask[b * t + i]).map(|i| ym[b * t + i]).collect())
            .collect();
        Ok((y_ocr, y_mid))
    }

    /// Scores one outfit: compatibility and per-item mismatch probabilities
    /// in request order.
    pub fn predict_outfit(&self, garment_ids: &[String], cache: &FeatureCache) -> Result<(f64, Vec<f64>)> {
        let n = garment_ids.len();
        if n < 2 || n > self.config.max_items {
            return Err(Error::Contract(format!("outfits must have 2..={} garments, got {n}", self.config.max_items)));
        }
        let mut rows = Vec::with_capacity(n);
        for id in garment_ids {
            rows.push(cache.features(id, self.config.multimodal).ok_or_else(|| Error::Lookup(id.clone()))?);
        }
        let batch = BatchedOutfits::from_features(&[rows], &[0.0], &[vec![0.0; n]], None)?;
        let (y, mut m) = self.predict(&batch)?;
        Ok((y[0], m.remove(0)))
    }
}
