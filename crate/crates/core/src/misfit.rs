//! MISFIT generation: partially mismatching outfits made by swapping `r`
//! garments of a compatible outfit for other garments of the same category.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, OutfitSample, Split};
use crate::error::{Error, Result};

/// Non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    /// `1 − r/n`.
    pub fn compatibility(r: usize, n: usize) -> Self {
        Self::new((n - r) as u64, n as u64)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisfitConfig {
    /// MISFITs per eligible outfit.
    pub m: usize,
    pub seed: u64,
    pub include_fully_incompatible: bool,
}

impl Default for MisfitConfig {
    fn default() -> Self {
        Self { m: 2, seed: 0, include_fully_incompatible: true }
    }
}

impl MisfitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub source_outfit_id: String,
    pub misfit_id: String,
    pub n: usize,
    /// Drawn positions, sorted.
    pub positions: Vec<usize>,
    /// Replacement ids aligned with `positions`; `None` where no other
    /// garment of the category existed.
    pub replaced_with: Vec<Option<String>>,
    /// Positions actually replaced.
    pub r: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<usize>,
}

/// Number of garments to replace: uniform over `1..=n−2`, and 1 when n = 3.
/// Outfits with n ≤ 2 are not eligible.
pub fn draw_r<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<usize> {
    match n {
        0..=2 => None,
        3 => Some(1),
        _ => Some(rng.random_range(1..=n - 2)),
    }
}

/// A uniformly drawn size-`r` subset of `0..n`, sorted.
pub fn draw_positions<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Vec<usize> {
    let mut p = index::sample(rng, n, r).into_vec();
    p.sort_unstable();
    p
}

/// Generated samples with their exact compatibility targets.
#[derive(Debug, Clone, Default)]
pub struct MisfitSet {
    pub samples: Vec<OutfitSample>,
    /// Exact `t_ocr` of each sample.
    pub targets: Vec<Ratio>,
    pub records: Vec<ReplacementRecord>,
    /// Source outfits skipped because n ≤ 2.
    pub ineligible: Vec<String>,
}

struct Replacements {
    by_key: HashMap<(usize, Option<Split>), Vec<usize>>,
}

impl Replacements {
    fn new(catalog: &Catalog) -> Self {
        let mut by_key: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, g) in catalog.garments().iter().enumerate() {
            by_key.entry((g.category_id, g.split)).or_default().push(i);
        }
        Self { by_key }
    }

    /// Same category and, when the garment has one, the same garment split.
    fn draw<'c, R: Rng + ?Sized>(&self, catalog: &'c Catalog, original: &str, rng: &mut R) -> Result<Option<&'c str>> {
        let g = catalog.lookup(original)?;
        let pool = &self.by_key[&(g.category_id, g.split)];
        if pool.len() < 2 {
            return Ok(None);
        }
        loop {
            let pick = &catalog.garments()[*pool.choose(rng).expect("non-empty")];
            if pick.id != original {
                return Ok(Some(&pick.id));
            }
        }
    }
}

/// `m` MISFITs per compatible outfit with n > 2. Each source outfit uses
/// its own random stream, so results do not depend on input order.
pub fn generate_misfits(outfits: &[OutfitSample], catalog: &Catalog, config: &MisfitConfig) -> Result<MisfitSet> {
    config.validate()?;
    let pool = Replacements::new(catalog);
    let mut out = MisfitSet::default();
    for (k, src) in outfits.iter().enumerate() {
        if src.t_ocr != 1.0 {
            return Err(Error::Contract(format!(
                "MISFITs are generated from compatible outfits, `{}` has t_ocr {}",
                src.outfit_id, src.t_ocr
            )));
        }
        let n = src.n();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64);
        if n <= 2 {
            out.ineligible.push(src.outfit_id.clone());
            continue;
        }
        for j in 0..config.m {
            let r = draw_r(n, &mut rng).expect("eligible");
            let positions = draw_positions(n, r, &mut rng);
            let mut garment_ids = src.garment_ids.clone();
            let mut t_mid = vec![0u8; n];
            let mut replaced_with = Vec::with_capacity(r);
            let mut skipped = Vec::new();
            for &p in &positions {
                match pool.draw(catalog, &src.garment_ids[p], &mut rng)? {
                    Some(id) => {
                        garment_ids[p] = id.to_string();
                        t_mid[p] = 1;
                        replaced_with.push(Some(id.to_string()));
                    }
                    None => {
                        log::warn!(
                            "outfit `{}`: no replacement for position {p} ({})",
                            src.outfit_id,
                            src.garment_ids[p]
                        );
                        skipped.push(p);
                        replaced_with.push(None);
                    }
                }
            }
            let done = positions.len() - skipped.len();
            let misfit_id = format!("{}-m{}", src.outfit_id, j + 1);
            out.records.push(ReplacementRecord {
                source_outfit_id: src.outfit_id.clone(),
                misfit_id: misfit_id.clone(),
                n,
                positions,
                replaced_with,
                r: done,
                skipped,
            });
            if done == 0 {
                continue;
            }
            let target = Ratio::compatibility(done, n);
            out.samples.push(OutfitSample {
                outfit_id: misfit_id,
                garment_ids,
                t_ocr: target.to_f64(),
                t_mid,
                split: src.split,
            });
            out.targets.push(target);
        }
    }
    Ok(out)
}

pub fn write_replacements(path: impl AsRef<Path>, records: &[ReplacementRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_replacements(path: impl AsRef<Path>) -> Result<Vec<ReplacementRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Share of each outfit kind, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub compatible: f64,
    pub misfit: f64,
    pub incompatible: f64,
}

/// Expected composition for `c` compatible outfits paired with `c`
/// incompatible ones, of which `ineligible` compatible outfits have n ≤ 2.
pub fn expected_composition(c: u64, ineligible: u64, m: u64) -> Composition {
    let misfits = m * (c - ineligible);
    let total = (2 * c + misfits) as f64;
    Composition {
        compatible: 100.0 * c as f64 / total,
        misfit: 100.0 * misfits as f64 / total,
        incompatible: 100.0 * c as f64 / total,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub t_ocr: Ratio,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub m: usize,
    pub compatible: usize,
    pub incompatible: usize,
    pub misfits: usize,
    pub ineligible: usize,
    pub total: usize,
    pub composition: Composition,
    pub per_split: BTreeMap<Split, usize>,
    pub histogram: Vec<HistogramBin>,
}

impl DistributionReport {
    /// Plain-text summary with a bar per histogram bin.
    pub fn render(&self) -> String {
        let mut s = format!(
            "m = {}: {} samples, {} compatible ({:.2}%), {} MISFITs ({:.2}%), {} incompatible ({:.2}%)\n",
            self.m,
            self.total,
            self.compatible,
            self.composition.compatible,
            self.misfits,
            self.composition.misfit,
            self.incompatible,
            self.composition.incompatible
        );
        if self.ineligible > 0 {
            s += &format!("{} compatible outfits with n <= 2 produced no MISFITs\n", self.ineligible);
        }
        for (split, n) in &self.per_split {
            s += &format!("  {split}: {n}\n");
        }
        let peak = self.histogram.iter().map(|b| b.count).max().unwrap_or(1).max(1);
        s += "t_ocr histogram:\n";
        for b in &self.histogram {
            let bar = "#".repeat((40 * b.count).div_ceil(peak));
            s += &format!("  {:>6} ({:.3}) {:>7} {bar}\n", b.t_ocr.to_string(), b.value, b.count);
        }
        s
    }
}

/// Full training corpus: compatible outfits, their MISFITs and (optionally)
/// the fully incompatible outfits.
#[derive(Debug, Clone)]
pub struct MisfitDataset {
    pub samples: Vec<OutfitSample>,
    pub targets: Vec<Ratio>,
    pub records: Vec<ReplacementRecord>,
    pub report: DistributionReport,
}

pub fn build_misfit_dataset(outfits: &[OutfitSample], catalog: &Catalog, config: &MisfitConfig) -> Result<MisfitDataset> {
    let compatible: Vec<OutfitSample> = outfits.iter().filter(|o| o.t_ocr == 1.0).cloned().collect();
    let incompatible: Vec<OutfitSample> = if config.include_fully_incompatible {
        outfits.iter().filter(|o| o.t_ocr == 0.0).cloned().collect()
    } else {
        Vec::new()
    };
    let set = generate_misfits(&compatible, catalog, config)?;

    let mut samples = compatible.clone();
    let mut targets = vec![Ratio::new(1, 1); compatible.len()];
    samples.extend(set.samples.iter().cloned());
    targets.extend(set.targets.iter().copied());
    samples.extend(incompatible.iter().cloned());
    targets.extend(std::iter::repeat_n(Ratio::new(0, 1), incompatible.len()));

    let total = samples.len();
    let pct = |k: usize| if total == 0 { 0.0 } else { 100.0 * k as f64 / total as f64 };
    let mut per_split = BTreeMap::new();
    for s in &samples {
        *per_split.entry(s.split).or_insert(0) += 1;
    }
    let mut bins: BTreeMap<Ratio, usize> = BTreeMap::new();
    for t in &targets {
        *bins.entry(*t).or_insert(0) += 1;
    }
    let histogram = bins
        .into_iter()
        .map(|(t_ocr, count)| HistogramBin { t_ocr, value: t_ocr.to_f64(), count })
        .collect();
    let report = DistributionReport {
        m: config.m,
        compatible: compatible.len(),
        incompatible: incompatible.len(),
        misfits: set.samples.len(),
        ineligible: set.ineligible.len(),
        total,
        composition: Composition {
            compatible: pct(compatible.len()),
            misfit: pct(set.samples.len()),
            incompatible: pct(incompatible.len()),
        },
        per_split,
        histogram,
    };
    Ok(MisfitDataset { samples, targets, records: set.records, report })
}
