use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, OutfitSample, Split, MAX_ITEMS};
use crate::error::{Error, Result};

/// Garment indices grouped by (category, archetype), optionally restricted
/// to one garment split.
struct Pools {
    by_cell: BTreeMap<(usize, usize), Vec<usize>>,
    by_category: BTreeMap<usize, Vec<usize>>,
}

impl Pools {
    fn new(catalog: &Catalog, pool: Option<Split>) -> Self {
        let mut by_cell: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        let mut by_category: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, g) in catalog.garments().iter().enumerate() {
            if pool.is_some() && g.split != pool {
                continue;
            }
            by_category.entry(g.category_id).or_default().push(i);
            if let Some(a) = g.archetype {
                by_cell.entry((g.category_id, a)).or_default().push(i);
            }
        }
        Self { by_cell, by_category }
    }
}

fn check_range(catalog: &Catalog, n_range: &RangeInclusive<usize>) -> Result<()> {
    let (lo, hi) = (*n_range.start(), *n_range.end());
    if lo < 2 || hi > MAX_ITEMS || lo > hi {
        return Err(Error::Config(format!("outfit size range {lo}..={hi} must lie within 2..={MAX_ITEMS}")));
    }
    let cats = catalog.category_count();
    if hi > cats {
        return Err(Error::Config(format!(
            "outfit size up to {hi} needs that many distinct categories, catalog has {cats}"
        )));
    }
    Ok(())
}

fn label(split: Option<Split>) -> Split {
    split.unwrap_or(Split::Train)
}

/// Outfits built from one archetype: `n` distinct categories, one garment
/// of that archetype per category. Targets are fully compatible.
pub fn sample_compatible_outfits<R: Rng + ?Sized>(
    catalog: &Catalog,
    count: usize,
    n_range: RangeInclusive<usize>,
    pool: Option<Split>,
    rng: &mut R,
) -> Result<Vec<OutfitSample>> {
    check_range(catalog, &n_range)?;
    let pools = Pools::new(catalog, pool);
    let archetypes: Vec<usize> = {
        let mut a: Vec<usize> = pools.by_cell.keys().map(|k| k.1).collect();
        a.sort_unstable();
        a.dedup();
        a
    };
    if archetypes.is_empty() {
        return Err(Error::Data("compatible outfits need garments with known archetypes".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.random_range(n_range.clone());
        let mut drawn = None;
        for _ in 0..64 {
            let a = archetypes[rng.random_range(0..archetypes.len())];
            let cats: Vec<usize> = pools.by_cell.keys().filter(|k| k.1 == a).map(|k| k.0).collect();
            if cats.len() >= n {
                drawn = Some((a, cats));
                break;
            }
        }
        let (a, cats) = drawn.ok_or_else(|| {
            Error::Data(format!("no archetype offers {n} populated categories in the {} pool", label(pool)))
        })?;
        let garment_ids = index::sample(rng, cats.len(), n)
            .into_iter()
            .map(|ci| {
                let cell = &pools.by_cell[&(cats[ci], a)];
                catalog.garments()[*cell.choose(rng).expect("non-empty cell")].id.clone()
            })
            .collect();
        out.push(OutfitSample {
            outfit_id: format!("c{i:05}"),
            garment_ids,
            t_ocr: 1.0,
            t_mid: vec![0; n],
            split: label(pool),
        });
    }
    Ok(out)
}

/// Outfits of `n` distinct categories with garments drawn uniformly per
/// category. Draws whose garments all share one archetype are redrawn.
pub fn sample_incompatible_outfits<R: Rng + ?Sized>(
    catalog: &Catalog,
    count: usize,
    n_range: RangeInclusive<usize>,
    pool: Option<Split>,
    rng: &mut R,
) -> Result<Vec<OutfitSample>> {
    check_range(catalog, &n_range)?;
    let pools = Pools::new(catalog, pool);
    let cats: Vec<usize> = pools.by_category.keys().copied().collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.random_range(n_range.clone());
        if cats.len() < n {
            return Err(Error::Data(format!(
                "the {} pool has {} populated categories, outfit needs {n}",
                label(pool),
                cats.len()
            )));
        }
        let mut picks = Vec::new();
        for _ in 0..64 {
            picks = index::sample(rng, cats.len(), n)
                .into_iter()
                .map(|ci| *pools.by_category[&cats[ci]].choose(rng).expect("non-empty category"))
                .collect();
            let first = catalog.garments()[picks[0]].archetype;
            let uniform = first.is_some() && picks.iter().all(|&g| catalog.garments()[g].archetype == first);
            if !uniform {
                break;
            }
        }
        out.push(OutfitSample {
            outfit_id: format!("i{i:05}"),
            garment_ids: picks.iter().map(|&g| catalog.garments()[g].id.clone()).collect(),
            t_ocr: 0.0,
            t_mid: vec![1; n],
            split: label(pool),
        });
    }
    Ok(out)
}

/// How many compatible and incompatible outfits to draw and how to split
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutfitPlan {
    pub compatible: usize,
    pub incompatible: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub split_fractions: [f64; 3],
    /// Outfits of a split only use garments of the same split.
    pub disjoint: bool,
}

impl Default for OutfitPlan {
    fn default() -> Self {
        Self {
            compatible: 1000,
            incompatible: 1000,
            n_min: 3,
            n_max: 8,
            split_fractions: [0.7, 0.1, 0.2],
            disjoint: true,
        }
    }
}

fn split_counts(total: usize, f: [f64; 3]) -> [usize; 3] {
    let train = ((f[0] * total as f64).round() as usize).min(total);
    let valid = ((f[1] * total as f64).round() as usize).min(total - train);
    [train, valid, total - train - valid]
}

/// Compatible and incompatible outfits for every split, with global ids
/// `c00000…` and `i00000…`.
pub fn build_outfit_corpus<R: Rng + ?Sized>(catalog: &Catalog, plan: &OutfitPlan, rng: &mut R) -> Result<Vec<OutfitSample>> {
    let f = plan.split_fractions;
    if f.iter().any(|v| *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split_fractions {f:?} must be non-negative and sum to 1")));
    }
    let range = plan.n_min..=plan.n_max;
    let cc = split_counts(plan.compatible, f);
    let ic = split_counts(plan.incompatible, f);
    let mut out = Vec::with_capacity(plan.compatible + plan.incompatible);
    let (mut nc, mut ni) = (0, 0);
    for (s, split) in Split::ALL.into_iter().enumerate() {
        let pool = plan.disjoint.then_some(split);
        for mut o in sample_compatible_outfits(catalog, cc[s], range.clone(), pool, rng)? {
            o.outfit_id = format!("c{nc:05}");
            o.split = split;
            nc += 1;
            out.push(o);
        }
        for mut o in sample_incompatible_outfits(catalog, ic[s], range.clone(), pool, rng)? {
            o.outfit_id = format!("i{ni:05}");
            o.split = split;
            ni += 1;
            out.push(o);
        }
    }
    Ok(out)
}
