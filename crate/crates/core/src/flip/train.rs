use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_batch, FlipConfig, FlipModel};
use crate::catalog::{Catalog, Garment, Split};
use crate::error::{Error, Result};
use crate::numeric::{AdamState, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipEpoch {
    /// 0 is the untrained model; epoch `k` is measured after `k` passes.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub valid_loss: f64,
    /// Top-1 image→text accuracy within validation batches.
    pub valid_retrieval: f64,
}

#[derive(Debug, Clone)]
pub struct FlipRun {
    pub model: FlipModel,
    pub curve: Vec<FlipEpoch>,
    pub test_loss: Option<f64>,
    pub test_retrieval: Option<f64>,
}

/// Mean loss and top-1 retrieval over consecutive full batches.
pub fn evaluate_batches(model: &FlipModel, garments: &[&Garment], batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut hits, mut batches, mut pairs) = (0.0, 0usize, 0usize, 0usize);
    for chunk in garments.chunks_exact(batch) {
        let mut g = Graph::new();
        let b = model.params.attach(&mut g, false);
        let images = g.constant(image_batch(chunk)?);
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|x| x.text_tokens.clone()).collect();
        let (l, logits) = model.loss(&mut g, &b, images, &tokens)?;
        loss += g.value(l).item();
        for (i, row) in g.value(logits).data().chunks_exact(batch).enumerate() {
            let best = (0..batch).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
            hits += usize::from(best == i);
        }
        batches += 1;
        pairs += batch;
    }
    if batches == 0 {
        return Err(Error::Data(format!("need at least {batch} held-out garments for a contrastive batch")));
    }
    Ok((loss / batches as f64, hits as f64 / pairs as f64))
}

fn check_modalities(garments: &[&Garment]) -> Result<()> {
    for g in garments {
        if g.image.is_none() || g.text_tokens.is_empty() {
            return Err(Error::Config(format!("garment `{}` lacks an image or text tokens", g.id)));
        }
    }
    Ok(())
}

/// Trains on the garment train split with Adam and the configured step
/// decay; validation batches are drawn once from the valid split.
pub fn train_flip(catalog: &Catalog, config: FlipConfig) -> Result<FlipRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pick = |s: Split| -> Vec<&Garment> { catalog.garments().iter().filter(|g| g.split == Some(s)).collect() };
    let (mut train, mut valid, mut test) = (pick(Split::Train), pick(Split::Valid), pick(Split::Test));
    if train.is_empty() {
        train = catalog.garments().iter().collect();
    }
    if valid.is_empty() {
        let held: Vec<&Garment> = train.iter().step_by(10).copied().collect();
        train = train.iter().enumerate().filter(|(i, _)| i % 10 != 0).map(|(_, g)| *g).collect();
        valid = held;
    }
    check_modalities(&train)?;
    check_modalities(&valid)?;
    if let Some(max) = catalog.garments().iter().flat_map(|g| g.text_tokens.iter()).max() {
        if *max >= config.vocab_size {
            return Err(Error::Config(format!(
                "token id {max} does not fit vocab_size {}",
                config.vocab_size
            )));
        }
    }
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let mut model = FlipModel::new(config.clone(), &mut rng)?;
    let mut adam = AdamState::new(model.params.tensors(), config.schedule.lr(0))?;
    let (vl, vr) = evaluate_batches(&model, &valid, config.batch)?;
    let mut curve = vec![FlipEpoch { epoch: 0, lr: config.schedule.lr(0), train_loss: None, valid_loss: vl, valid_retrieval: vr }];
    log::info!("flip epoch 0: valid loss {vl:.4}, retrieval {vr:.3}");

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch);
        adam.set_lr(lr)?;
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for idx in order.chunks_exact(config.batch) {
            let chunk: Vec<&Garment> = idx.iter().map(|&i| train[i]).collect();
            let mut g = Graph::new();
            let b = model.params.attach(&mut g, true);
            let images = g.constant(image_batch(&chunk)?);
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|x| x.text_tokens.clone()).collect();
            let (loss, _) = model.loss(&mut g, &b, images, &tokens)?;
            total += g.value(loss).item();
            steps += 1;
            g.backward(loss)?;
            let grads = model.params.grads(&g, &b);
            adam.step(model.params.tensors_mut(), &grads)?;
        }
        let (vl, vr) = evaluate_batches(&model, &valid, config.batch)?;
        let train_loss = (steps > 0).then(|| total / steps as f64);
        log::info!("flip epoch {}: train loss {:.4}, valid loss {vl:.4}, retrieval {vr:.3}", epoch + 1, train_loss.unwrap_or(f64::NAN));
        curve.push(FlipEpoch { epoch: epoch + 1, lr, train_loss, valid_loss: vl, valid_retrieval: vr });
    }
    let test_eval = if test.len() >= config.batch { Some(evaluate_batches(&model, &test, config.batch)?) } else { None };
    Ok(FlipRun {
        model,
        curve,
        test_loss: test_eval.map(|t| t.0),
        test_retrieval: test_eval.map(|t| t.1),
    })
}
