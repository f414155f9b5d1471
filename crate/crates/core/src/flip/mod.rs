//! Contrastive image-text pre-training of small encoders, and the cached
//! features the downstream model consumes.

mod cache;
mod train;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Garment, Image};
use crate::error::{Error, Result};
use crate::numeric::{Bound, Graph, ParamId, ParamSet, StepDecay, Tensor, Var};

pub use cache::{extract_features, extract_features_cached, raw_features, Extraction, FeatureCache, FeatureSource, Provenance};
pub use train::{evaluate_batches, train_flip, FlipEpoch, FlipRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipConfig {
    /// Encoder output width `e`.
    pub embed_dim: usize,
    /// Shared projection width `p`.
    pub proj_dim: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub schedule: StepDecay,
    pub logit_scale_init: f64,
    pub seed: u64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            proj_dim: 64,
            conv1_channels: 8,
            conv2_channels: 16,
            image_size: 32,
            vocab_size: 64,
            epochs: 20,
            batch: 32,
            schedule: StepDecay::default(),
            logit_scale_init: (1.0f64 / 0.07).ln(),
            seed: 0,
        }
    }
}

impl FlipConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.proj_dim == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return cfg("FLIP widths must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return cfg(format!("image_size {} must be a positive multiple of 4", self.image_size));
        }
        if self.batch < 2 {
            return cfg(format!("contrastive batches need at least 2 pairs, got {}", self.batch));
        }
        if self.vocab_size < 2 {
            return cfg("vocab_size must be at least 2".into());
        }
        Ok(())
    }

    fn pooled(&self) -> usize {
        self.conv2_channels * (self.image_size / 4) * (self.image_size / 4)
    }
}

#[derive(Debug, Clone, Copy)]
struct FlipIds {
    c1_w: ParamId,
    c1_b: ParamId,
    c2_w: ParamId,
    c2_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    emb: ParamId,
    t_w: ParamId,
    t_b: ParamId,
    pv_w: ParamId,
    pv_b: ParamId,
    pt_w: ParamId,
    pt_b: ParamId,
    logit_scale: ParamId,
}

/// Visual and text encoders with their projections onto the shared space.
#[derive(Debug, Clone)]
pub struct FlipModel {
    pub config: FlipConfig,
    pub params: ParamSet,
    ids: FlipIds,
}

/// Encoder outputs and normalized projections for one batch.
pub struct FlipForward {
    pub visual: Var,
    pub text: Var,
    pub fv: Var,
    pub ft: Var,
}

impl FlipModel {
    /// Xavier-uniform dense and conv weights, `N(0, 0.02)` embeddings, zero
    /// biases.
    pub fn new<R: Rng + ?Sized>(config: FlipConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, p) = (config.embed_dim, config.proj_dim);
        let (c1, c2) = (config.conv1_channels, config.conv2_channels);
        let mut ps = ParamSet::new();
        let ids = FlipIds {
            c1_w: ps.add("visual.conv1.weight", Tensor::xavier_uniform(&[c1, 3, 3, 3], 27, c1 * 9, rng)),
            c1_b: ps.add("visual.conv1.bias", Tensor::zeros(&[c1])),
            c2_w: ps.add("visual.conv2.weight", Tensor::xavier_uniform(&[c2, c1, 3, 3], c1 * 9, c2 * 9, rng)),
            c2_b: ps.add("visual.conv2.bias", Tensor::zeros(&[c2])),
            v_w: ps.add("visual.dense.weight", Tensor::xavier_uniform(&[config.pooled(), e], config.pooled(), e, rng)),
            v_b: ps.add("visual.dense.bias", Tensor::zeros(&[e])),
            emb: ps.add("text.embedding", Tensor::normal(&[config.vocab_size, e], 0.02, rng)),
            t_w: ps.add("text.dense.weight", Tensor::xavier_uniform(&[e, e], e, e, rng)),
            t_b: ps.add("text.dense.bias", Tensor::zeros(&[e])),
            pv_w: ps.add("proj_visual.weight", Tensor::xavier_uniform(&[e, p], e, p, rng)),
            pv_b: ps.add("proj_visual.bias", Tensor::zeros(&[p])),
            pt_w: ps.add("proj_text.weight", Tensor::xavier_uniform(&[e, p], e, p, rng)),
            pt_b: ps.add("proj_text.bias", Tensor::zeros(&[p])),
            logit_scale: ps.add("logit_scale", Tensor::scalar(config.logit_scale_init)),
        };
        Ok(Self { config, params: ps, ids })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: FlipConfig, params: ParamSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config, &mut rng)?;
        check_layout(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path, serde_json::json!({ "flip": self.config }))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let (params, meta) = ParamSet::load(path)?;
        let config: FlipConfig = serde_json::from_value(meta.get("flip").cloned().unwrap_or_default()).map_err(|e| {
            Error::Parse { path: path.display().to_string(), message: format!("flip config: {e}") }
        })?;
        Self::from_params(config, params)
    }

    /// SHA-256 of the serialized weights.
    pub fn hash(&self) -> String {
        let bytes = self.params.to_bytes(serde_json::json!({ "flip": self.config })).expect("serializable");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get(self.ids.logit_scale).item()
    }

    /// `[B, 3, H, W]` images → `[B, e]`.
    pub fn encode_images(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<Var> {
        let ids = self.ids;
        let x = g.conv2d(images, b[ids.c1_w], b[ids.c1_b])?;
        let x = g.gelu(x);
        let x = g.avg_pool2(x)?;
        let x = g.conv2d(x, b[ids.c2_w], b[ids.c2_b])?;
        let x = g.gelu(x);
        let x = g.avg_pool2(x)?;
        let batch = g.shape(x)[0];
        let x = g.reshape(x, &[batch, self.config.pooled()])?;
        g.linear(x, b[ids.v_w], Some(b[ids.v_b]))
    }

    /// Token lists → `[B, e]`.
    pub fn encode_texts(&self, g: &mut Graph, b: &Bound, tokens: &[Vec<usize>]) -> Result<Var> {
        let x = g.embedding_mean(b[self.ids.emb], tokens)?;
        g.linear(x, b[self.ids.t_w], Some(b[self.ids.t_b]))
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, images: Var, tokens: &[Vec<usize>]) -> Result<FlipForward> {
        let visual = self.encode_images(g, b, images)?;
        let text = self.encode_texts(g, b, tokens)?;
        let pv = g.linear(visual, b[self.ids.pv_w], Some(b[self.ids.pv_b]))?;
        let pt = g.linear(text, b[self.ids.pt_w], Some(b[self.ids.pt_b]))?;
        Ok(FlipForward { visual, text, fv: g.l2_normalize(pv), ft: g.l2_normalize(pt) })
    }

    /// Logits `exp(logit_scale) · F_V · F_Tᵀ`.
    pub fn logits(&self, g: &mut Graph, b: &Bound, fwd: &FlipForward) -> Result<Var> {
        let ftt = g.transpose(fwd.ft)?;
        let sim = g.matmul(fwd.fv, ftt)?;
        let scale = g.exp(b[self.ids.logit_scale]);
        g.scale_by(sim, scale)
    }

    /// Symmetric contrastive loss of aligned image-text pairs.
    pub fn loss(&self, g: &mut Graph, b: &Bound, images: Var, tokens: &[Vec<usize>]) -> Result<(Var, Var)> {
        let batch = g.shape(images)[0];
        if batch < 2 || tokens.len() != batch {
            return Err(Error::Contract(format!(
                "contrastive loss needs at least 2 aligned pairs, got {batch} images and {} texts",
                tokens.len()
            )));
        }
        let fwd = self.forward(g, b, images, tokens)?;
        let logits = self.logits(g, b, &fwd)?;
        Ok((contrastive_loss(g, logits)?, logits))
    }
}

/// Mean of row-wise and column-wise cross-entropy with targets on the
/// diagonal of a `B×B` logit matrix.
pub fn contrastive_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a B×B logit matrix with B ≥ 2, got {s:?}")));
    }
    g.diag_cross_entropy(logits)
}

pub(crate) fn check_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Data(format!(
            "weight file holds tensors {:?}, expected {:?}",
            got.names(),
            expected.names()
        )));
    }
    for ((n, a), b) in expected.names().iter().zip(expected.tensors()).zip(got.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Data(format!("tensor `{n}` has shape {:?}, expected {:?}", b.shape(), a.shape())));
        }
    }
    Ok(())
}

/// Stacks garment renders into a `[B, 3, H, W]` tensor.
pub fn image_batch(garments: &[&Garment]) -> Result<Tensor> {
    let first: &Image = garments
        .first()
        .and_then(|g| g.image.as_ref())
        .ok_or_else(|| Error::Config("image batch needs garments with images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(garments.len() * 3 * h * w);
    for g in garments {
        let img = g.image.as_ref().ok_or_else(|| Error::Config(format!("garment `{}` has no image", g.id)))?;
        if (img.height, img.width) != (h, w) {
            return Err(Error::dim("image batch", &[img.height, img.width], &[h, w]));
        }
        data.extend(img.data.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![garments.len(), 3, h, w], data)
}
