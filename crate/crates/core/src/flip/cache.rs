//! Feature cache file: an 8-byte little-endian header length, a JSON header
//! `{dim, provenance, content_hash, ids}`, then for each id its visual and
//! text vectors as little-endian `f64`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{image_batch, FlipConfig, FlipModel};
use crate::catalog::{Catalog, Garment};
use crate::error::{Error, Result};
use crate::numeric::Graph;

const EXTRACT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Flip,
    ImagenetStub,
    Raw,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Flip => "flip",
            Provenance::ImagenetStub => "imagenet-stub",
            Provenance::Raw => "raw",
        })
    }
}

/// Where features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource<'a> {
    /// A trained model.
    Flip(&'a FlipModel),
    /// Randomly initialized, frozen encoders.
    Stub(FlipConfig),
    /// Pixel block means and hashed bag-of-words counts of the given width.
    Raw(usize),
}

impl FeatureSource<'_> {
    pub fn provenance(&self) -> Provenance {
        match self {
            FeatureSource::Flip(_) => Provenance::Flip,
            FeatureSource::Stub(_) => Provenance::ImagenetStub,
            FeatureSource::Raw(_) => Provenance::Raw,
        }
    }

    fn dim(&self) -> usize {
        match self {
            FeatureSource::Flip(m) => m.config.embed_dim,
            FeatureSource::Stub(c) => c.embed_dim,
            FeatureSource::Raw(d) => *d,
        }
    }

    fn fingerprint(&self) -> String {
        match self {
            FeatureSource::Flip(m) => m.hash(),
            FeatureSource::Stub(c) => serde_json::to_string(c).expect("serializable"),
            FeatureSource::Raw(d) => format!("raw:{d}"),
        }
    }

    /// Identifies the cache contents for a catalog.
    pub fn content_hash(&self, catalog: &Catalog) -> String {
        let mut h = Sha256::new();
        h.update(catalog.content_hash().as_bytes());
        h.update(self.provenance().to_string().as_bytes());
        h.update(self.fingerprint().as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub dim: usize,
    pub provenance: Provenance,
    pub content_hash: String,
    ids: Vec<String>,
    visual: Vec<f64>,
    text: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    dim: usize,
    provenance: Provenance,
    content_hash: String,
    ids: Vec<String>,
}

impl FeatureCache {
    pub fn new(dim: usize, provenance: Provenance, content_hash: String, entries: Vec<(String, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut c = Self {
            dim,
            provenance,
            content_hash,
            ids: Vec::with_capacity(entries.len()),
            visual: Vec::with_capacity(entries.len() * dim),
            text: Vec::with_capacity(entries.len() * dim),
            index: HashMap::with_capacity(entries.len()),
        };
        for (id, v, t) in entries {
            if v.len() != dim || t.len() != dim {
                return Err(Error::dim("feature cache entry", &[v.len(), t.len()], &[dim, dim]));
            }
            if v.iter().chain(&t).any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("non-finite feature for garment `{id}`")));
            }
            if c.index.insert(id.clone(), c.ids.len()).is_some() {
                return Err(Error::Data(format!("duplicate cache entry `{id}`")));
            }
            c.ids.push(id);
            c.visual.extend(v);
            c.text.extend(t);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn visual(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| &self.visual[i * self.dim..(i + 1) * self.dim])
    }

    pub fn text(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| &self.text[i * self.dim..(i + 1) * self.dim])
    }

    /// Visual features, or visual followed by text when `multimodal`.
    pub fn features(&self, id: &str, multimodal: bool) -> Option<Vec<f64>> {
        let v = self.visual(id)?;
        let mut out = v.to_vec();
        if multimodal {
            out.extend_from_slice(self.text(id)?);
        }
        Some(out)
    }

    /// Ids from `ids` that have no entry.
    pub fn missing<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        let mut out: Vec<String> = ids.into_iter().filter(|id| !self.index.contains_key(*id)).cloned().collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CacheHeader {
            dim: self.dim,
            provenance: self.provenance,
            content_hash: self.content_hash.clone(),
            ids: self.ids.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 16 * self.visual.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for i in 0..self.ids.len() {
            for v in &self.visual[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &self.text[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Parse { path: path.display().to_string(), message: m };
        let hlen = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated header length".into()))?;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CacheHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let d = header.dim;
        let payload = &bytes[8 + hlen..];
        if payload.len() != header.ids.len() * 2 * d * 8 {
            return Err(bad(format!("expected {} feature records of width {d}", header.ids.len())));
        }
        let vals: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let entries = header
            .ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let rec = &vals[i * 2 * d..(i + 1) * 2 * d];
                (id, rec[..d].to_vec(), rec[d..].to_vec())
            })
            .collect();
        Self::new(d, header.provenance, header.content_hash, entries)
    }
}

/// Result of a feature extraction pass.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub cache: FeatureCache,
    /// Garments skipped for lacking a modality.
    pub omitted: Vec<String>,
    /// Garments pushed through an encoder during this call.
    pub encoder_evaluations: usize,
    pub cache_hit: bool,
}

/// Block means of the flattened render and hashed token counts, each of
/// width `dim`.
pub fn raw_features(g: &Garment, dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let img = g.image.as_ref()?;
    let n = img.data.len();
    let visual = (0..dim)
        .map(|j| {
            let (lo, hi) = (j * n / dim, ((j + 1) * n / dim).max(j * n / dim + 1).min(n));
            img.data[lo..hi].iter().map(|&v| v as f64).sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mut text = vec![0.0; dim];
    for t in &g.text_tokens {
        text[t % dim] += 1.0;
    }
    Some((visual, text))
}

fn encode_all(model: &FlipModel, garments: &[&Garment]) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>> {
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(garments.len());
    for chunk in garments.chunks(EXTRACT_CHUNK) {
        let mut g = Graph::new();
        let b = model.params.attach(&mut g, false);
        let images = g.constant(image_batch(chunk)?);
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|x| x.text_tokens.clone()).collect();
        let v = model.encode_images(&mut g, &b, images)?;
        let t = model.encode_texts(&mut g, &b, &tokens)?;
        let (vv, tv) = (g.value(v).data(), g.value(t).data());
        for (i, gar) in chunk.iter().enumerate() {
            out.push((gar.id.clone(), vv[i * e..(i + 1) * e].to_vec(), tv[i * e..(i + 1) * e].to_vec()));
        }
    }
    Ok(out)
}

/// One pass over the catalog. Garments without an image or tokens are
/// listed in `omitted` rather than failing the pass.
pub fn extract_features(catalog: &Catalog, source: &FeatureSource<'_>) -> Result<Extraction> {
    let (usable, omitted): (Vec<&Garment>, Vec<&Garment>) =
        catalog.garments().iter().partition(|g| g.image.is_some() && !g.text_tokens.is_empty());
    let omitted: Vec<String> = omitted.into_iter().map(|g| g.id.clone()).collect();
    for id in &omitted {
        log::warn!("garment `{id}` lacks a modality and is left out of the feature cache");
    }
    let entries = match source {
        FeatureSource::Flip(model) => encode_all(model, &usable)?,
        FeatureSource::Stub(config) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let stub = FlipModel::new(config.clone(), &mut rng)?;
            encode_all(&stub, &usable)?
        }
        FeatureSource::Raw(dim) => usable
            .iter()
            .map(|g| {
                let (v, t) = raw_features(g, *dim).expect("usable garments have images");
                (g.id.clone(), v, t)
            })
            .collect(),
    };
    let cache = FeatureCache::new(source.dim(), source.provenance(), source.content_hash(catalog), entries)?;
    Ok(Extraction { cache, omitted, encoder_evaluations: usable.len(), cache_hit: false })
}

/// Like [`extract_features`], but reuses `path` when it already holds the
/// features for this exact catalog and source.
pub fn extract_features_cached(path: impl AsRef<Path>, catalog: &Catalog, source: &FeatureSource<'_>) -> Result<Extraction> {
    let path = path.as_ref();
    let want = source.content_hash(catalog);
    if path.exists() {
        if let Ok(cache) = FeatureCache::load(path) {
            if cache.content_hash == want {
                let omitted = catalog.garments().iter().filter(|g| cache.visual(&g.id).is_none()).map(|g| g.id.clone()).collect();
                return Ok(Extraction { cache, omitted, encoder_evaluations: 0, cache_hit: true });
            }
        }
    }
    let ex = extract_features(catalog, source)?;
    ex.cache.save(path)?;
    Ok(ex)
}
