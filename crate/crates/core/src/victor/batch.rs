use crate::catalog::OutfitSample;
use crate::error::{Error, Result};
use crate::flip::FeatureCache;
use crate::numeric::Tensor;

/// Outfits padded to a common length `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedOutfits {
    pub batch: usize,
    pub tokens: usize,
    pub in_dim: usize,
    /// `[batch, tokens, in_dim]`, zero in padded slots.
    pub features: Tensor,
    /// `batch·tokens` flags, true for real garments.
    pub pad_mask: Vec<bool>,
    pub t_ocr: Vec<f64>,
    /// `batch·tokens` targets, zero in padded slots.
    pub t_mid: Vec<f64>,
}

impl BatchedOutfits {
    /// Builds a batch from per-outfit feature rows. `pad_to` widens the
    /// padding beyond the longest outfit.
    pub fn from_features(
        outfits: &[Vec<Vec<f64>>],
        t_ocr: &[f64],
        t_mid: &[Vec<f64>],
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let batch = outfits.len();
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if t_ocr.len() != batch || t_mid.len() != batch {
            return Err(Error::dim("batch targets", &[batch], &[t_ocr.len(), t_mid.len()]));
        }
        let longest = outfits.iter().map(Vec::len).max().unwrap_or(0);
        let tokens = pad_to.unwrap_or(longest).max(longest);
        let in_dim = outfits.iter().flatten().map(Vec::len).next().unwrap_or(0);
        if in_dim == 0 || tokens == 0 {
            return Err(Error::Contract("batch has no garment features".into()));
        }
        let mut features = vec![0.0; batch * tokens * in_dim];
        let mut pad_mask = vec![false; batch * tokens];
        let mut mid = vec![0.0; batch * tokens];
        for (b, rows) in outfits.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Contract(format!("outfit {b} in the batch has no garments")));
            }
            if t_mid[b].len() != rows.len() {
                return Err(Error::dim("t_mid", &[t_mid[b].len()], &[rows.len()]));
            }
            for (i, f) in rows.iter().enumerate() {
                if f.len() != in_dim {
                    return Err(Error::dim("garment features", &[f.len()], &[in_dim]));
                }
                let at = (b * tokens + i) * in_dim;
                features[at..at + in_dim].copy_from_slice(f);
                pad_mask[b * tokens + i] = true;
                mid[b * tokens + i] = t_mid[b][i];
            }
        }
        Ok(Self {
            batch,
            tokens,
            in_dim,
            features: Tensor::new(vec![batch, tokens, in_dim], features)?,
            pad_mask,
            t_ocr: t_ocr.to_vec(),
            t_mid: mid,
        })
    }

    /// Looks every garment up in `cache`; missing ids are reported together.
    pub fn from_samples(samples: &[&OutfitSample], cache: &FeatureCache, multimodal: bool, pad_to: Option<usize>) -> Result<Self> {
        let missing = cache.missing(samples.iter().flat_map(|s| s.garment_ids.iter()));
        if !missing.is_empty() {
            return Err(Error::CacheMiss(missing));
        }
        let rows: Vec<Vec<Vec<f64>>> = samples
            .iter()
            .map(|s| s.garment_ids.iter().map(|id| cache.features(id, multimodal).expect("checked")).collect())
            .collect();
        let t_ocr: Vec<f64> = samples.iter().map(|s| s.t_ocr).collect();
        let t_mid: Vec<Vec<f64>> = samples.iter().map(|s| s.t_mid.iter().map(|&b| b as f64).collect()).collect();
        Self::from_features(&rows, &t_ocr, &t_mid, pad_to)
    }

    /// Number of real garments in row `b`.
    pub fn items(&self, b: usize) -> usize {
        self.pad_mask[b * self.tokens..(b + 1) * self.tokens].iter().filter(|&&m| m).count()
    }
}
