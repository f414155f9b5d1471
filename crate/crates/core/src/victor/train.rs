use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{victor_loss, BatchedOutfits, TaskMode, VictorConfig, VictorModel};
use crate::catalog::{OutfitSample, Split};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, topsis_select, AucScore, Criterion, MetricReport, Prediction, Target};
use crate::flip::FeatureCache;
use crate::numeric::{AdamState, Graph, ParamSet};

/// One line of `metrics.jsonl`. Metrics a task mode does not train are
/// left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_exact_match: Option<f64>,
    /// Null when the validation split lacks one of the outfit classes.
    #[serde(default)]
    pub valid_auc: Option<f64>,
}

/// Weights after one epoch with the validation metrics that rank them.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub metrics: EpochRecord,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The TOPSIS-selected checkpoint.
    pub model: VictorModel,
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_epoch: usize,
    /// Names of the criteria that entered the selection.
    pub criteria: Vec<String>,
    /// Validation loss of the freshly initialised model.
    pub initial_valid_loss: f64,
}

impl TrainOutcome {
    pub fn selected(&self) -> &EpochRecord {
        &self.records[self.selected_epoch - 1]
    }
}

pub(crate) fn auc_score(mode: TaskMode) -> AucScore {
    if mode.trains_ocr() {
        AucScore::Ocr
    } else {
        AucScore::MidMean
    }
}

/// Eval-mode predictions and metrics of `model` on `samples`.
pub fn evaluate(model: &VictorModel, samples: &[&OutfitSample], cache: &FeatureCache) -> Result<(Vec<Prediction>, MetricReport)> {
    let cfg = &model.config;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch) {
        let batch = BatchedOutfits::from_samples(chunk, cache, cfg.multimodal, None)?;
        let (y, m) = model.predict(&batch)?;
        preds.extend(y.into_iter().zip(m).map(|(y_ocr, y_mid)| Prediction { y_ocr, y_mid }));
    }
    let targets: Vec<Target> = samples.iter().map(|s| Target { t_ocr: s.t_ocr, t_mid: s.t_mid.clone() }).collect();
    let report = compute_metrics(&preds, &targets, cfg.threshold, auc_score(cfg.task_mode))?;
    Ok((preds, report))
}

fn eval_loss(model: &VictorModel, samples: &[&OutfitSample], cache: &FeatureCache) -> Result<f64> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(cfg.batch) {
        let batch = BatchedOutfits::from_samples(chunk, cache, cfg.multimodal, None)?;
        let mut g = Graph::new();
        let p = model.params.attach(&mut g, false);
        let out = model.forward(&mut g, &p, &batch, false, &mut rng)?;
        let loss = victor_loss(&mut g, &out, &batch, cfg.task_mode, cfg.alpha)?;
        total += g.value(loss.total).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

fn record(epoch: usize, lr: f64, train_loss: f64, valid_loss: f64, m: &MetricReport, mode: TaskMode) -> EpochRecord {
    let mid = mode.trains_mid();
    EpochRecord {
        epoch,
        lr,
        train_loss,
        valid_loss,
        valid_mae: mode.trains_ocr().then_some(m.mae),
        valid_accuracy: mid.then_some(m.binary_accuracy),
        valid_exact_match: mid.then_some(m.exact_match),
        valid_auc: m.auc,
    }
}

/// Picks an epoch by TOPSIS over validation MAE (cost), binary accuracy and
/// exact match (benefits), using whichever of them the mode records.
/// Columns that are zero for every epoch carry no ranking information and
/// are dropped; ties go to the earliest epoch.
pub fn select_checkpoint(records: &[EpochRecord]) -> Result<(usize, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::Contract("no epochs to select from".into()));
    }
    type Getter = fn(&EpochRecord) -> Option<f64>;
    let all: [(&str, Criterion, Getter); 3] = [
        ("mae", Criterion::Cost, |r| r.valid_mae),
        ("accuracy", Criterion::Benefit, |r| r.valid_accuracy),
        ("exact_match", Criterion::Benefit, |r| r.valid_exact_match),
    ];
    let used: Vec<_> = all
        .iter()
        .filter(|(_, _, get)| records.iter().all(|r| get(r).is_some()) && records.iter().any(|r| get(r) != Some(0.0)))
        .collect();
    if used.is_empty() {
        return Ok((records[0].epoch, Vec::new()));
    }
    let matrix: Vec<Vec<f64>> = records.iter().map(|r| used.iter().map(|(_, _, get)| get(r).unwrap()).collect()).collect();
    let kinds: Vec<Criterion> = used.iter().map(|(_, k, _)| *k).collect();
    let best = topsis_select(&matrix, &kinds)?;
    Ok((records[best].epoch, used.iter().map(|(n, _, _)| n.to_string()).collect()))
}

/// Trains on the train split with Adam and step decay, validating after
/// every epoch, and returns the TOPSIS-selected checkpoint.
pub fn train_victor(samples: &[OutfitSample], cache: &FeatureCache, config: VictorConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if cache.dim != config.feature_dim {
        return Err(Error::Config(format!(
            "feature cache has width {}, config expects feature_dim {}",
            cache.dim,
            config.feature_dim
        )));
    }
    let missing = cache.missing(samples.iter().flat_map(|s| s.garment_ids.iter()));
    if !missing.is_empty() {
        return Err(Error::CacheMiss(missing));
    }
    if let Some(s) = samples.iter().find(|s| s.n() > config.max_items) {
        return Err(Error::Data(format!("outfit `{}` has {} garments, max_items is {}", s.outfit_id, s.n(), config.max_items)));
    }
    if config.task_mode == TaskMode::OCb {
        if let Some(s) = samples.iter().find(|s| !s.is_binary()) {
            return Err(Error::Contract(format!("OCb training needs binary outfit labels, `{}` has t_ocr = {}", s.outfit_id, s.t_ocr)));
        }
    }
    let pick = |sp: Split| -> Vec<&OutfitSample> { samples.iter().filter(|s| s.split == sp).collect() };
    let (mut train, mut valid) = (pick(Split::Train), pick(Split::Valid));
    if valid.is_empty() {
        valid = train.iter().step_by(10).copied().collect();
        train = train.iter().enumerate().filter(|(i, _)| i % 10 != 0).map(|(_, s)| *s).collect();
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(format!("need train and valid outfits, got {} and {}", train.len(), valid.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VictorModel::new(config.clone(), &mut rng)?;
    let mut adam = AdamState::new(model.params.tensors(), config.schedule.lr(0))?;
    let initial_valid_loss = eval_loss(&model, &valid, cache)?;
    log::info!("victor {}: epoch 0 valid loss {initial_valid_loss:.4}", config.task_mode);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.schedule.lr(epoch - 1);
        adam.set_lr(lr)?;
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in order.chunks(config.batch) {
            let chunk: Vec<&OutfitSample> = idx.iter().map(|&i| train[i]).collect();
            let batch = BatchedOutfits::from_samples(&chunk, cache, config.multimodal, None)?;
            let mut g = Graph::new();
            let p = model.params.attach(&mut g, true);
            let out = model.forward(&mut g, &p, &batch, true, &mut rng)?;
            let loss = victor_loss(&mut g, &out, &batch, config.task_mode, config.alpha)?;
            total += g.value(loss.total).item() * chunk.len() as f64;
            seen += chunk.len();
            g.backward(loss.total)?;
            let grads = model.params.grads(&g, &p);
            adam.step(model.params.tensors_mut(), &grads)?;
        }
        let valid_loss = eval_loss(&model, &valid, cache)?;
        let (_, m) = evaluate(&model, &valid, cache)?;
        let rec = record(epoch, lr, total / seen as f64, valid_loss, &m, config.task_mode);
        log::info!(
            "victor {} epoch {epoch}: train {:.4} valid {valid_loss:.4} mae {:?} acc {:?} em {:?} auc {:?}",
            config.task_mode,
            rec.train_loss,
            rec.valid_mae,
            rec.valid_accuracy,
            rec.valid_exact_match,
            rec.valid_auc
        );
        checkpoints.push(CheckpointRecord { epoch, metrics: rec.clone(), params: model.params.clone() });
        records.push(rec);
    }
    if records.is_empty() {
        return Ok(TrainOutcome { model, records, checkpoints, selected_epoch: 0, criteria: Vec::new(), initial_valid_loss });
    }
    let (selected_epoch, criteria) = select_checkpoint(&records)?;
    let chosen = VictorModel::from_params(config, checkpoints[selected_epoch - 1].params.clone())?;
    Ok(TrainOutcome { model: chosen, records, checkpoints, selected_epoch, criteria, initial_valid_loss })
}

/// Writes one JSON object per epoch.
pub fn write_metrics(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
}
