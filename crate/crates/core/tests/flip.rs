use misfitlab::catalog::*;
use misfitlab::flip::*;
use misfitlab::numeric::gradcheck::audit;
use misfitlab::numeric::{Bound, Graph, Tensor};
use misfitlab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn universe(items: usize) -> Universe {
    generate_universe(&UniverseConfig { items_per_category_per_archetype: items, ..Default::default() }).unwrap()
}

fn config_for(u: &Universe) -> FlipConfig {
    FlipConfig { vocab_size: u.catalog.vocab_size(), ..Default::default() }
}

fn batch_loss(model: &FlipModel, garments: &[&Garment]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let b = model.params.attach(&mut g, false);
    let images = g.constant(image_batch(garments).unwrap());
    let tokens: Vec<Vec<usize>> = garments.iter().map(|x| x.text_tokens.clone()).collect();
    let fwd = model.forward(&mut g, &b, images, &tokens).unwrap();
    let (fv, ft) = (g.value(fwd.fv).data().to_vec(), g.value(fwd.ft).data().to_vec());
    let (l, _) = model.loss(&mut g, &b, images, &tokens).unwrap();
    (g.value(l).item(), fv, ft)
}

#[test]
fn perfectly_aligned_pairs_have_vanishing_loss() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::new(vec![2, 2], vec![20.0, 0.0, 0.0, 20.0]).unwrap());
    let l = contrastive_loss(&mut g, logits).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn uniform_logits_give_log_batch() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::full(&[32, 32], 3.7));
    let l = contrastive_loss(&mut g, logits).unwrap();
    assert!((g.value(l).item() - 32f64.ln()).abs() < 1e-12);
}

#[test]
fn unit_temperature_random_init_is_near_log_batch() {
    let u = universe(8);
    let cfg = FlipConfig { logit_scale_init: 0.0, ..config_for(&u) };
    let model = FlipModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let gs: Vec<&Garment> = u.catalog.garments().iter().step_by(7).take(32).collect();
    let (loss, _, _) = batch_loss(&model, &gs);
    assert!((loss - 32f64.ln()).abs() < 0.15, "loss {loss}");
}

#[test]
fn projections_are_unit_norm_and_loss_is_order_free() {
    let u = universe(4);
    let model = FlipModel::new(config_for(&u), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let gs: Vec<&Garment> = u.catalog.garments().iter().step_by(5).take(16).collect();
    let (loss, fv, ft) = batch_loss(&model, &gs);
    assert!(loss >= 0.0);
    for row in fv.chunks(64).chain(ft.chunks(64)) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    let mut rev = gs.clone();
    rev.reverse();
    rev.swap(0, 7);
    let (loss2, _, _) = batch_loss(&model, &rev);
    assert!((loss - loss2).abs() < 1e-12);
}

#[test]
fn single_pair_batch_is_rejected() {
    let u = universe(2);
    let model = FlipModel::new(config_for(&u), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let gs = vec![&u.catalog.garments()[0]];
    let mut g = Graph::new();
    let b = model.params.attach(&mut g, false);
    let images = g.constant(image_batch(&gs).unwrap());
    let e = model.loss(&mut g, &b, images, &[gs[0].text_tokens.clone()]);
    assert!(matches!(e, Err(Error::Contract(_))));
}

fn tiny_flip() -> (FlipModel, Tensor, Vec<Vec<usize>>) {
    let cfg = FlipConfig {
        embed_dim: 4,
        proj_dim: 3,
        conv1_channels: 2,
        conv2_channels: 2,
        image_size: 8,
        vocab_size: 6,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = FlipModel::new(cfg, &mut rng).unwrap();
    let images = Tensor::new(vec![3, 3, 8, 8], (0..3 * 3 * 64).map(|i| ((i * 37 % 101) as f64) / 101.0).collect()).unwrap();
    (model, images, vec![vec![1, 2], vec![3, 4, 4], vec![5]])
}

fn flip_audit(model: &FlipModel, images: &Tensor, tokens: &[Vec<usize>], h: f64) -> f64 {
    audit(model.params.tensors(), h, |g, vars| {
        let b = Bound::from_vars(vars.to_vec());
        let x = g.constant(images.clone());
        Ok(model.loss(g, &b, x, tokens)?.0)
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn contrastive_loss_gradient_matches_finite_differences() {
    let (mut model, images, tokens) = tiny_flip();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let emb = model.params.names().iter().position(|n| n == "text.embedding").unwrap();
    let shape = model.params.tensors()[emb].shape().to_vec();
    model.params.tensors_mut()[emb] = Tensor::normal(&shape, 1.0, &mut rng);
    let err = flip_audit(&model, &images, &tokens, 1e-4);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn finite_difference_error_at_init_shrinks_quadratically() {
    let (model, images, tokens) = tiny_flip();
    let coarse = flip_audit(&model, &images, &tokens, 1e-4);
    let fine = flip_audit(&model, &images, &tokens, 1e-5);
    assert!(fine < 1e-5 && coarse / fine > 50.0, "{coarse} -> {fine}");
}

#[test]
fn training_is_deterministic() {
    let u = universe(6);
    let cfg = FlipConfig { epochs: 2, batch: 8, ..config_for(&u) };
    let a = train_flip(&u.catalog, cfg.clone()).unwrap();
    let b = train_flip(&u.catalog, cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model.hash(), b.model.hash());
}

#[test]
fn model_file_round_trip() {
    let u = universe(2);
    let model = FlipModel::new(config_for(&u), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flip.bin");
    model.save(&p).unwrap();
    let back = FlipModel::load(&p).unwrap();
    assert_eq!(back.hash(), model.hash());
}

#[test]
fn extraction_covers_catalog_and_memoizes() {
    let u = generate_universe(&UniverseConfig::default()).unwrap();
    let model = FlipModel::new(config_for(&u), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("features.bin");
    let src = FeatureSource::Flip(&model);
    let first = extract_features_cached(&p, &u.catalog, &src).unwrap();
    assert_eq!(first.cache.len(), 1600);
    assert_eq!(first.encoder_evaluations, 1600);
    assert!(!first.cache_hit);
    let second = extract_features_cached(&p, &u.catalog, &src).unwrap();
    assert!(second.cache_hit);
    assert_eq!(second.encoder_evaluations, 0);
    assert_eq!(second.cache, first.cache);
    assert_eq!(second.cache.provenance, Provenance::Flip);

    let other = FlipModel::new(config_for(&u), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let third = extract_features_cached(&p, &u.catalog, &FeatureSource::Flip(&other)).unwrap();
    assert!(!third.cache_hit);
}

#[test]
fn garments_without_a_modality_are_omitted() {
    let u = universe(2);
    let mut garments = u.catalog.garments().to_vec();
    garments[3].image = None;
    garments[5].text_tokens.clear();
    let catalog = Catalog::new(garments).unwrap();
    let ex = extract_features(&catalog, &FeatureSource::Raw(64)).unwrap();
    assert_eq!(ex.omitted, vec![catalog.garments()[3].id.clone(), catalog.garments()[5].id.clone()]);
    assert_eq!(ex.cache.len(), catalog.len() - 2);
    assert_eq!(ex.cache.missing(catalog.garments().iter().map(|g| &g.id)).len(), 2);
}

#[test]
fn stub_and_raw_caches_are_finite_with_width_e() {
    let u = universe(2);
    for src in [FeatureSource::Stub(config_for(&u)), FeatureSource::Raw(64)] {
        let ex = extract_features(&u.catalog, &src).unwrap();
        for id in ex.cache.ids() {
            let v = ex.cache.features(id, true).unwrap();
            assert_eq!(v.len(), 128);
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}

/// Nearest class-mean accuracy on the test split with means fitted on the
/// train split.
fn probe(u: &Universe, cache: &FeatureCache) -> f64 {
    let k = u.config.archetypes;
    let d = cache.dim;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for g in u.catalog.garments().iter().filter(|g| g.split == Some(Split::Train)) {
        let a = g.archetype.unwrap();
        for (m, v) in means[a].iter_mut().zip(cache.visual(&g.id).unwrap()) {
            *m += v;
        }
        counts[a] += 1.0;
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let test: Vec<&Garment> = u.catalog.garments().iter().filter(|g| g.split == Some(Split::Test)).collect();
    let hits = test
        .iter()
        .filter(|g| {
            let v = cache.visual(&g.id).unwrap();
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            Some(best) == g.archetype
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn flip_features_separate_archetypes_better_than_pixels() {
    let u = universe(20);
    let run = train_flip(&u.catalog, FlipConfig { epochs: 6, ..config_for(&u) }).unwrap();
    let flip = extract_features(&u.catalog, &FeatureSource::Flip(&run.model)).unwrap().cache;
    let raw = extract_features(&u.catalog, &FeatureSource::Raw(64)).unwrap().cache;
    let (pf, pr) = (probe(&u, &flip), probe(&u, &raw));
    assert!(pf > pr, "flip probe {pf} vs raw probe {pr}");
}
