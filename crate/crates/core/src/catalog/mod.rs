//! Garments, outfits and the canonical on-disk corpus.

mod corpus;
mod outfits;
mod universe;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use corpus::{load_corpus, read_image, save_corpus, write_image, Corpus};
pub use outfits::{build_outfit_corpus, sample_compatible_outfits, sample_incompatible_outfits, OutfitPlan};
pub use universe::{generate_universe, render, text_tokens, vocabulary, Universe, UniverseConfig};

/// Largest outfit the model accepts.
pub const MAX_ITEMS: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 3-channel render stored channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Garment {
    pub id: String,
    pub category_id: usize,
    pub category_name: String,
    pub text_tokens: Vec<usize>,
    pub image: Option<Image>,
    /// Ground-truth style archetype; only known for synthetic garments.
    pub archetype: Option<usize>,
    /// Garment-level split used in disjoint mode.
    pub split: Option<Split>,
}

/// An ordered outfit with its compatibility and per-item mismatch targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutfitSample {
    pub outfit_id: String,
    pub garment_ids: Vec<String>,
    pub t_ocr: f64,
    pub t_mid: Vec<u8>,
    pub split: Split,
}

impl OutfitSample {
    pub fn n(&self) -> usize {
        self.garment_ids.len()
    }

    /// Checks size bounds and that `t_ocr` and `t_mid` agree at the extremes.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |m: String| Error::Data(format!("outfit `{}`: {m}", self.outfit_id));
        if !(2..=MAX_ITEMS).contains(&n) {
            return Err(bad(format!("has {n} garments, expected 2..={MAX_ITEMS}")));
        }
        if self.t_mid.len() != n {
            return Err(bad(format!("t_mid has {} entries for {n} garments", self.t_mid.len())));
        }
        if self.t_mid.iter().any(|&b| b > 1) {
            return Err(bad("t_mid must be binary".into()));
        }
        if !(0.0..=1.0).contains(&self.t_ocr) {
            return Err(bad(format!("t_ocr {} outside [0, 1]", self.t_ocr)));
        }
        let ones = self.t_mid.iter().filter(|&&b| b == 1).count();
        if (self.t_ocr == 1.0) != (ones == 0) || (self.t_ocr == 0.0) != (ones == n) {
            return Err(bad(format!("t_ocr {} is inconsistent with t_mid {:?}", self.t_ocr, self.t_mid)));
        }
        Ok(())
    }

    /// True when the outfit is fully compatible or fully incompatible.
    pub fn is_binary(&self) -> bool {
        self.t_ocr == 0.0 || self.t_ocr == 1.0
    }
}

/// Immutable garment collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    garments: Vec<Garment>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(garments: Vec<Garment>) -> Result<Self> {
        let mut index = HashMap::with_capacity(garments.len());
        for (i, g) in garments.iter().enumerate() {
            if index.insert(g.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate garment id `{}`", g.id)));
            }
        }
        Ok(Self { garments, index })
    }

    pub fn garments(&self) -> &[Garment] {
        &self.garments
    }

    pub fn len(&self) -> usize {
        self.garments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.garments.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Garment> {
        self.index.get(id).map(|&i| &self.garments[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<&Garment> {
        self.get(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }

    /// One more than the largest category id.
    pub fn category_count(&self) -> usize {
        self.garments.iter().map(|g| g.category_id + 1).max().unwrap_or(0)
    }

    /// One more than the largest text token id.
    pub fn vocab_size(&self) -> usize {
        self.garments.iter().flat_map(|g| g.text_tokens.iter()).map(|t| t + 1).max().unwrap_or(0)
    }

    /// SHA-256 over every field a downstream encoder can see.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for g in &self.garments {
            h.update(g.id.as_bytes());
            h.update((g.category_id as u64).to_le_bytes());
            for t in &g.text_tokens {
                h.update((*t as u64).to_le_bytes());
            }
            if let Some(img) = &g.image {
                h.update((img.height as u64).to_le_bytes());
                h.update((img.width as u64).to_le_bytes());
                for v in &img.data {
                    h.update(v.to_le_bytes());
                }
            }
            h.update([0xff]);
        }
        hex::encode(h.finalize())
    }
}

/// Checks every outfit against the catalog and its own invariants.
pub fn check_outfits(catalog: &Catalog, outfits: &[OutfitSample]) -> Result<()> {
    let mut seen = HashMap::new();
    for o in outfits {
        if let Some(prev) = seen.insert(o.outfit_id.as_str(), o.split) {
            return Err(Error::Data(format!(
                "outfit id `{}` appears twice (splits {prev} and {})",
                o.outfit_id, o.split
            )));
        }
        for g in &o.garment_ids {
            if catalog.get(g).is_none() {
                return Err(Error::Referential {
                    outfit: o.outfit_id.clone(),
                    garment: g.clone(),
                });
            }
        }
        o.validate()?;
    }
    Ok(())
}
