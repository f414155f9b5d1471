use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Catalog, Garment, Image, Split};
use crate::error::{Error, Result};

const CATEGORY_NAMES: [&str; 8] = ["top", "bottom", "shoes", "bag", "outerwear", "jewelry", "hat", "scarf"];
const ARCHETYPE_NAMES: [&str; 5] = ["classic", "sporty", "bohemian", "minimal", "edgy"];

/// Levels per colour channel of a latent block.
const QUANT_LEVELS: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    pub categories: usize,
    pub archetypes: usize,
    pub style_dim: usize,
    pub items_per_category_per_archetype: usize,
    pub noise_sigma: f64,
    pub image_size: usize,
    /// Train / valid / test shares of each (category, archetype) cell.
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            archetypes: 5,
            style_dim: 16,
            items_per_category_per_archetype: 40,
            noise_sigma: 0.1,
            image_size: 32,
            split_fractions: [0.7, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl UniverseConfig {
    pub fn garment_count(&self) -> usize {
        self.categories * self.archetypes * self.items_per_category_per_archetype
    }

    fn grid_side(&self) -> usize {
        (self.style_dim as f64).sqrt().ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.categories < 2 || self.archetypes < 2 {
            return cfg(format!(
                "need at least 2 categories and 2 archetypes, got {} and {}",
                self.categories, self.archetypes
            ));
        }
        if self.style_dim < 2 {
            return cfg(format!("style_dim must be at least 2, got {}", self.style_dim));
        }
        if self.items_per_category_per_archetype == 0 {
            return cfg("items_per_category_per_archetype must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return cfg(format!("noise_sigma must be a non-negative number, got {}", self.noise_sigma));
        }
        if self.image_size < 4 * self.grid_side() {
            return cfg(format!(
                "image_size {} is too small for a {}x{} block grid",
                self.image_size,
                self.grid_side(),
                self.grid_side()
            ));
        }
        let f = self.split_fractions;
        if f.iter().any(|v| *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return cfg(format!("split_fractions {f:?} must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// A generated catalog together with its hidden geometry.
#[derive(Debug, Clone)]
pub struct Universe {
    pub config: UniverseConfig,
    pub centroids: Vec<Vec<f64>>,
    /// Style latent of each garment, aligned with `catalog.garments()`.
    pub latents: Vec<Vec<f64>>,
    pub catalog: Catalog,
}

impl Universe {
    pub fn nearest_centroid(&self, latent: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (a, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(latent, c);
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn category_name(c: usize) -> String {
    CATEGORY_NAMES.get(c).map_or_else(|| format!("category{c}"), |s| s.to_string())
}

fn archetype_name(a: usize) -> String {
    ARCHETYPE_NAMES.get(a).map_or_else(|| format!("style{a}"), |s| s.to_string())
}

/// Word for every token id; id 0 is reserved for padding.
pub fn vocabulary(config: &UniverseConfig) -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend((0..config.categories).map(category_name));
    v.extend((0..config.archetypes).map(archetype_name));
    v.extend((0..config.style_dim).map(|j| format!("vivid-{j}")));
    v.extend((0..config.style_dim).map(|j| format!("muted-{j}")));
    v
}

/// Category word, archetype word, and the words for the latent's largest
/// and smallest coordinates.
pub fn text_tokens(config: &UniverseConfig, category: usize, archetype: usize, latent: &[f64]) -> Vec<usize> {
    let argmax = (0..latent.len()).max_by(|&i, &j| latent[i].total_cmp(&latent[j])).unwrap_or(0);
    let argmin = (0..latent.len()).min_by(|&i, &j| latent[i].total_cmp(&latent[j])).unwrap_or(0);
    let (c, k) = (config.categories, config.archetypes);
    vec![1 + category, 1 + c + archetype, 1 + c + k + argmax, 1 + c + k + config.style_dim + argmin]
}

/// Colour-block render: latent coordinate `j` fills one block of a square
/// grid at a category-specific position, coloured on a hue wheel by its
/// quantized squashed value. Block centres carry a per-category gray.
pub fn render(config: &UniverseConfig, category: usize, latent: &[f64], layout: &[usize]) -> Image {
    let size = config.image_size;
    let side = config.grid_side();
    let block = size / side;
    let gray = (category + 1) as f32 / (config.categories + 1) as f32;
    let mut data = vec![0.0f32; Image::CHANNELS * size * size];
    let tau = std::f64::consts::TAU;
    for (j, &z) in latent.iter().enumerate() {
        let q = ((1.0 / (1.0 + (-z).exp())) * QUANT_LEVELS).round() / QUANT_LEVELS;
        let pos = layout[j];
        let (by, bx) = ((pos / side) * block, (pos % side) * block);
        for ch in 0..Image::CHANNELS {
            let v = (0.5 + 0.5 * (tau * q - ch as f64 * tau / 3.0).cos()) as f32;
            for y in by..by + block {
                for x in bx..bx + block {
                    let inner = (y - by) >= block / 4 && (y - by) < block - block / 4
                        && (x - bx) >= block / 4 && (x - bx) < block - block / 4;
                    data[(ch * size + y) * size + x] = if inner { gray } else { v };
                }
            }
        }
    }
    Image { height: size, width: size, data }
}

/// Draws archetype centroids, garment latents, renders and text, and
/// assigns garment-level splits stratified per (category, archetype) cell.
pub fn generate_universe(config: &UniverseConfig) -> Result<Universe> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..config.archetypes)
        .map(|_| (0..config.style_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let margin = 4.0 * config.noise_sigma;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            let d = sq_dist(&centroids[a], &centroids[b]).sqrt();
            if d <= margin {
                return Err(Error::Config(format!(
                    "archetype centroids {a} and {b} are {d:.3} apart, not more than 4·noise_sigma = {margin:.3}"
                )));
            }
        }
    }
    let layouts: Vec<Vec<usize>> = (0..config.categories)
        .map(|_| {
            let mut p: Vec<usize> = (0..config.grid_side().pow(2)).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let per = config.items_per_category_per_archetype;
    let f = config.split_fractions;
    let n_train = (f[0] * per as f64).round() as usize;
    let n_valid = ((f[1] * per as f64).round() as usize).min(per - n_train.min(per));
    let mut garments = Vec::with_capacity(config.garment_count());
    let mut latents = Vec::with_capacity(config.garment_count());
    for c in 0..config.categories {
        for a in 0..config.archetypes {
            let mut slots: Vec<usize> = (0..per).collect();
            slots.shuffle(&mut rng);
            for i in 0..per {
                let latent: Vec<f64> = centroids[a]
                    .iter()
                    .map(|m| if config.noise_sigma > 0.0 { m + noise.sample(&mut rng) } else { *m })
                    .collect();
                let rank = slots[i];
                let split = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_valid {
                    Split::Valid
                } else {
                    Split::Test
                };
                garments.push(Garment {
                    id: format!("g{:05}", garments.len()),
                    category_id: c,
                    category_name: category_name(c),
                    text_tokens: text_tokens(config, c, a, &latent),
                    image: Some(render(config, c, &latent, &layouts[c])),
                    archetype: Some(a),
                    split: Some(split),
                });
                latents.push(latent);
            }
        }
    }
    Ok(Universe {
        config: config.clone(),
        centroids,
        latents,
        catalog: Catalog::new(garments)?,
    })
}
