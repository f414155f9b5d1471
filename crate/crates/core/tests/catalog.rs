use std::collections::{HashMap, HashSet};

use misfitlab::catalog::*;
use misfitlab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> UniverseConfig {
    UniverseConfig { items_per_category_per_archetype: 12, ..Default::default() }
}

#[test]
fn save_then_load_is_identity() {
    let u = generate_universe(&small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plan = OutfitPlan { compatible: 60, incompatible: 60, ..Default::default() };
    let outfits = build_outfit_corpus(&u.catalog, &plan, &mut rng).unwrap();
    let corpus = Corpus { catalog: u.catalog.clone(), outfits };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    save_corpus(&path, &corpus).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back.catalog.content_hash(), corpus.catalog.content_hash());
}

#[test]
fn empty_file_is_an_empty_catalog() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("a.json", ""), ("b.json", "{}"), ("c.json", r#"{"garments": [], "outfits": []}"#)] {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        let c = load_corpus(&p).unwrap();
        assert!(c.catalog.is_empty() && c.outfits.is_empty());
    }
}

#[test]
fn dangling_garment_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let body = r#"{"garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [1]},
                                 {"id": "b", "category_id": 1, "category_name": "shoes", "text_tokens": [2]}],
                   "outfits": [{"outfit_id": "o1", "garment_ids": ["a", "zz9"], "t_ocr": 1.0, "t_mid": [0, 0], "split": "train"}]}"#;
    std::fs::write(&p, body).unwrap();
    let err = load_corpus(&p).unwrap_err();
    assert!(matches!(&err, Error::Referential { garment, .. } if garment == "zz9"));
    assert!(err.to_string().contains("zz9"));
}

#[test]
fn schema_violation_reports_json_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let body = r#"{"garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [1]},
                                 {"id": "b", "category_name": "shoes", "text_tokens": [2]}]}"#;
    std::fs::write(&p, body).unwrap();
    let err = load_corpus(&p).unwrap_err().to_string();
    assert!(err.contains("$.garments[1]") && err.contains("category_id"), "{err}");
}

#[test]
fn inconsistent_targets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let body = r#"{"garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [1]},
                                 {"id": "b", "category_id": 1, "category_name": "shoes", "text_tokens": [2]}],
                   "outfits": [{"outfit_id": "o1", "garment_ids": ["a", "b"], "t_ocr": 1.0, "t_mid": [0, 1], "split": "test"}]}"#;
    std::fs::write(&p, body).unwrap();
    assert!(matches!(load_corpus(&p), Err(Error::Data(_))));
}

#[test]
fn latents_classify_to_their_archetype() {
    let u = generate_universe(&UniverseConfig::default()).unwrap();
    let correct = u
        .catalog
        .garments()
        .iter()
        .zip(&u.latents)
        .filter(|(g, z)| g.archetype == Some(u.nearest_centroid(z)))
        .count();
    assert!(correct as f64 / u.catalog.len() as f64 >= 0.99);
}

#[test]
fn outfits_are_tighter_than_random_pairs() {
    let u = generate_universe(&UniverseConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let outfits = sample_compatible_outfits(&u.catalog, 500, 3..=8, None, &mut rng).unwrap();
    let dist = |i: usize, j: usize| -> f64 {
        u.latents[i].iter().zip(&u.latents[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (mut within, mut nw) = (0.0, 0);
    for o in &outfits {
        let idx: Vec<usize> = o.garment_ids.iter().map(|id| u.catalog.index_of(id).unwrap()).collect();
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                within += dist(idx[a], idx[b]);
                nw += 1;
            }
        }
    }
    let (mut across, mut na) = (0.0, 0);
    for _ in 0..20_000 {
        let (i, j) = (rng.random_range(0..u.catalog.len()), rng.random_range(0..u.catalog.len()));
        if i != j {
            across += dist(i, j);
            na += 1;
        }
    }
    assert!(within / nw as f64 * 2.0 < across / na as f64);
}

#[test]
fn every_outfit_id_lives_in_one_split() {
    let u = generate_universe(&small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = OutfitPlan { compatible: 200, incompatible: 200, ..Default::default() };
    let outfits = build_outfit_corpus(&u.catalog, &plan, &mut rng).unwrap();
    let mut splits: HashMap<&str, HashSet<Split>> = HashMap::new();
    for o in &outfits {
        splits.entry(&o.outfit_id).or_default().insert(o.split);
    }
    assert_eq!(splits.len(), outfits.len());
    assert!(splits.values().all(|s| s.len() == 1));
}
