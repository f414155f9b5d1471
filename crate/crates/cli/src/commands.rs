use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use misfitlab::catalog::{build_outfit_corpus, generate_universe, load_corpus, save_corpus, Corpus, OutfitSample, Split};
use misfitlab::eval::{ablation_table, count_flops, flops_table, printed_disagrees, efficiency_rows, AblationRow, MetricReport};
use misfitlab::flip::{extract_features_cached, train_flip, FeatureCache, FeatureSource, FlipConfig, FlipModel};
use misfitlab::misfit::{build_misfit_dataset, write_replacements};
use misfitlab::victor::{evaluate, train_victor, write_metrics, TaskMode, VictorConfig, VictorModel};

use crate::config::{RunConfig, Source};
use crate::fail::Failure;
use crate::manifest::Recorder;
use crate::*;

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Failure> {
        let cfg = RunConfig::load(c.config.as_deref())?;
        let seed = c.seed.or(cfg.seed).unwrap_or(0);
        Ok(Self { cfg, seed, out: c.out.clone() })
    }

    fn corpus(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("universe").join("corpus.json"))
    }

    fn dataset(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(misfit_dir(self.cfg.misfit.m)).join("dataset.json"))
    }

    fn features(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("features").join("features.cache"))
    }
}

fn misfit_dir(m: usize) -> String {
    format!("misfits-m{m}")
}

/// Contents of `dataset.json`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    m: usize,
    samples: Vec<OutfitSample>,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn read_dataset(path: &Path) -> Result<DatasetFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenerateUniverse(a) => generate(&Ctx::new(&a.common)?, &a).map(drop),
        Command::GenMisfits(a) => misfits(&Ctx::new(&a.common)?, &a).map(drop),
        Command::TrainFlip(a) => flip(&Ctx::new(&a.common)?, &a).map(drop),
        Command::ExtractFeatures(a) => features(&Ctx::new(&a.common)?, &a).map(drop),
        Command::TrainVictor(a) => victor(&Ctx::new(&a.common)?, &a).map(drop),
        Command::Evaluate(a) => eval(&Ctx::new(&a.common)?, &a),
        Command::FlopsReport(a) => flops(&Ctx::new(&a.common)?, &a),
        Command::Pipeline(a) => pipeline(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn generate(ctx: &Ctx, a: &UniverseArgs) -> Result<PathBuf, Failure> {
    let mut u = ctx.cfg.universe.clone();
    let mut plan = ctx.cfg.outfits.clone();
    u.seed = ctx.seed;
    u.categories = a.categories.unwrap_or(u.categories);
    u.archetypes = a.archetypes.unwrap_or(u.archetypes);
    u.items_per_category_per_archetype = a.items_per_cell.unwrap_or(u.items_per_category_per_archetype);
    plan.compatible = a.compatible.unwrap_or(plan.compatible);
    plan.incompatible = a.incompatible.unwrap_or(plan.incompatible);
    let mut rec = Recorder::new("generate-universe", serde_json::json!({ "universe": u, "outfits": plan }), ctx.seed, &ctx.out.join("universe"))?;
    let universe = generate_universe(&u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(1));
    let outfits = build_outfit_corpus(&universe.catalog, &plan, &mut rng)?;
    let path = rec.output("corpus.json");
    println!("{} garments, {} outfits -> {}", universe.catalog.len(), outfits.len(), path.display());
    save_corpus(&path, &Corpus { catalog: universe.catalog, outfits })?;
    rec.finish()?;
    Ok(path)
}

fn misfits(ctx: &Ctx, a: &MisfitArgs) -> Result<PathBuf, Failure> {
    let corpus_path = ctx.corpus(&a.corpus);
    let mut cfg = ctx.cfg.misfit.clone();
    cfg.seed = ctx.seed;
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.include_fully_incompatible &= !a.no_incompatible;
    cfg.validate()?;
    let mut rec = Recorder::new("gen-misfits", &cfg, ctx.seed, &ctx.out.join(misfit_dir(cfg.m)))?;
    rec.input(&corpus_path, "generate-universe")?;
    let corpus = load_corpus(&corpus_path)?;
    let ds = build_misfit_dataset(&corpus.outfits, &corpus.catalog, &cfg)?;
    let path = rec.output("dataset.json");
    write_json(&path, &DatasetFile { m: cfg.m, samples: ds.samples })?;
    write_replacements(rec.output("replacements.jsonl"), &ds.records)?;
    write_json(&rec.output("distribution.json"), &ds.report)?;
    let text = ds.report.render();
    write_text(&rec.output("distribution.txt"), &text)?;
    print!("{text}");
    rec.finish()?;
    Ok(path)
}

fn flip_config(ctx: &Ctx, vocab: usize) -> FlipConfig {
    let mut cfg = ctx.cfg.flip.clone();
    cfg.seed = ctx.seed;
    cfg.vocab_size = cfg.vocab_size.max(vocab);
    cfg
}

fn flip(ctx: &Ctx, a: &FlipArgs) -> Result<PathBuf, Failure> {
    let corpus_path = ctx.corpus(&a.corpus);
    crate::manifest::verify(&corpus_path, "generate-universe")?;
    let corpus = load_corpus(&corpus_path)?;
    let mut cfg = flip_config(ctx, corpus.catalog.vocab_size());
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    if let Some(lr) = a.lr {
        cfg.schedule.base_lr = lr;
    }
    cfg.validate()?;
    let mut rec = Recorder::new("train-flip", &cfg, ctx.seed, &ctx.out.join("flip"))?;
    rec.input(&corpus_path, "generate-universe")?;
    let run = train_flip(&corpus.catalog, cfg)?;
    let path = rec.output("flip.bin");
    run.model.save(&path)?;
    let mut curve = Vec::new();
    for e in &run.curve {
        serde_json::to_writer(&mut curve, e).map_err(|e| Failure::runtime(e.to_string()))?;
        curve.push(b'\n');
    }
    let cpath = rec.output("curve.jsonl");
    std::fs::File::create(&cpath).and_then(|mut f| f.write_all(&curve)).map_err(|e| Failure::io(&cpath, e))?;
    let (first, last) = (&run.curve[0], run.curve.last().expect("epoch 0"));
    println!(
        "flip: valid loss {:.4} -> {:.4}, retrieval {:.3} -> {:.3}",
        first.valid_loss, last.valid_loss, first.valid_retrieval, last.valid_retrieval
    );
    rec.finish()?;
    Ok(path)
}

fn features(ctx: &Ctx, a: &FeatureArgs) -> Result<PathBuf, Failure> {
    let corpus_path = ctx.corpus(&a.corpus);
    let source = a.source.unwrap_or(ctx.cfg.features.source);
    let dim = a.dim.unwrap_or(ctx.cfg.features.dim);
    let mut rec = Recorder::new("extract-features", serde_json::json!({ "source": source, "dim": dim }), ctx.seed, &ctx.out.join("features"))?;
    rec.input(&corpus_path, "generate-universe")?;
    let corpus = load_corpus(&corpus_path)?;
    let model;
    let src = match source {
        Source::Flip => {
            let p = a.flip.clone().unwrap_or_else(|| ctx.out.join("flip").join("flip.bin"));
            rec.input(&p, "train-flip")?;
            model = FlipModel::load(&p)?;
            FeatureSource::Flip(&model)
        }
        Source::Stub => FeatureSource::Stub(flip_config(ctx, corpus.catalog.vocab_size())),
        Source::Raw => FeatureSource::Raw(dim),
    };
    let path = rec.output("features.cache");
    let ex = extract_features_cached(&path, &corpus.catalog, &src)?;
    println!(
        "{} garments cached ({}), {} omitted{}",
        ex.cache.len(),
        path.display(),
        ex.omitted.len(),
        if ex.cache_hit { ", reused existing cache" } else { "" }
    );
    rec.finish()?;
    Ok(path)
}

fn victor_config(ctx: &Ctx, f: &VictorFlags) -> Result<VictorConfig, Failure> {
    let mut v = ctx.cfg.victor_config(f.preset)?;
    v.task_mode = f.mode.unwrap_or(v.task_mode);
    v.alpha = f.alpha.unwrap_or(v.alpha);
    v.epochs = f.epochs.unwrap_or(v.epochs);
    v.batch = f.batch.unwrap_or(v.batch);
    v.layers = f.layers.unwrap_or(v.layers);
    v.multimodal |= f.multimodal;
    if let Some(lr) = f.lr {
        v.schedule.base_lr = lr;
    }
    v.seed = ctx.seed;
    v.validate()?;
    Ok(v)
}

struct Inputs {
    dataset: DatasetFile,
    cache: FeatureCache,
}

fn load_inputs(rec: &mut Recorder, dataset: &Path, features: &Path) -> Result<Inputs, Failure> {
    rec.input(dataset, "gen-misfits")?;
    rec.input(features, "extract-features")?;
    Ok(Inputs { dataset: read_dataset(dataset)?, cache: FeatureCache::load(features)? })
}

fn victor(ctx: &Ctx, a: &VictorArgs) -> Result<PathBuf, Failure> {
    let (dataset, feats) = (ctx.dataset(&a.dataset), ctx.features(&a.features));
    let mut cfg = victor_config(ctx, &a.victor)?;
    // The label needs m, which lives in the dataset; peek before recording.
    let m = read_dataset(&dataset).map(|d| d.m).unwrap_or(ctx.cfg.misfit.m);
    let label = cfg.label(m);
    let mut rec = Recorder::new("train-victor", &cfg, ctx.seed, &ctx.out.join(&label))?;
    let inp = load_inputs(&mut rec, &dataset, &feats)?;
    cfg.feature_dim = inp.cache.dim;
    rec.set_config(&cfg)?;
    let outcome = train_victor(&inp.dataset.samples, &inp.cache, cfg)?;
    let path = rec.output("victor.bin");
    outcome.model.save(&path)?;
    write_metrics(rec.output("metrics.jsonl"), &outcome.records)?;
    write_json(
        &rec.output("selection.json"),
        &serde_json::json!({
            "selected_epoch": outcome.selected_epoch,
            "criteria": outcome.criteria,
            "record": outcome.records.get(outcome.selected_epoch.wrapping_sub(1)),
        }),
    )?;
    println!("{label}: selected epoch {} of {} by TOPSIS over {:?}", outcome.selected_epoch, outcome.records.len(), outcome.criteria);
    rec.finish()?;
    Ok(path)
}

fn test_split(samples: &[OutfitSample]) -> Result<Vec<&OutfitSample>, Failure> {
    let test: Vec<&OutfitSample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Failure::data("the dataset has no test outfits"));
    }
    Ok(test)
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    label: String,
    model_hash: String,
    split: &'static str,
    metrics: MetricReport,
}

fn print_metrics(label: &str, m: &MetricReport) {
    let auc = m.auc.map_or_else(|| format!("undefined ({})", m.auc_undefined.clone().unwrap_or_default()), |a| format!("{a:.4}"));
    println!(
        "{label}: AUC {auc}, MAE {:.4}, accuracy {:.2}%, exact match {:.2}% over {} outfits",
        m.mae, m.binary_accuracy, m.exact_match, m.outfits
    );
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<(), Failure> {
    let (dataset, feats) = (ctx.dataset(&a.dataset), ctx.features(&a.features));
    let base = victor_config(ctx, &a.victor)?;
    let mut rec = Recorder::new("evaluate", serde_json::json!({ "ablation": a.ablation, "victor": base }), ctx.seed, &ctx.out.join("eval"))?;
    let inp = load_inputs(&mut rec, &dataset, &feats)?;
    let test = test_split(&inp.dataset.samples)?;
    let m = inp.dataset.m;
    if !a.ablation {
        let path = a.model.clone().unwrap_or_else(|| ctx.out.join(VictorConfig::default().label(m)).join("victor.bin"));
        rec.input(&path, "train-victor")?;
        let model = VictorModel::load(&path)?;
        let (_, metrics) = evaluate(&model, &test, &inp.cache)?;
        let label = model.config.label(m);
        print_metrics(&label, &metrics);
        write_json(&rec.output("metrics.json"), &EvalRecord { label, model_hash: model.hash(), split: "test", metrics })?;
        rec.finish()?;
        return Ok(());
    }
    let alphas = a.alphas.clone().unwrap_or_else(|| ctx.cfg.alphas.clone());
    let mut configs = vec![
        VictorConfig { task_mode: TaskMode::OCr, ..base.clone() },
        VictorConfig { task_mode: TaskMode::MID, ..base.clone() },
    ];
    configs.extend(alphas.iter().map(|&alpha| VictorConfig { task_mode: TaskMode::MTL, alpha, ..base.clone() }));
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for mut cfg in configs {
        cfg.feature_dim = inp.cache.dim;
        cfg.validate()?;
        let label = cfg.label(m);
        let outcome = train_victor(&inp.dataset.samples, &inp.cache, cfg.clone())?;
        let (_, metrics) = evaluate(&outcome.model, &test, &inp.cache)?;
        print_metrics(&label, &metrics);
        let sub = rec.dir().join("ablation").join(&label);
        std::fs::create_dir_all(&sub).map_err(|e| Failure::io(&sub, e))?;
        outcome.model.save(rec.output(&format!("ablation/{label}/victor.bin")))?;
        write_metrics(rec.output(&format!("ablation/{label}/metrics.jsonl")), &outcome.records)?;
        records.push(EvalRecord { label: label.clone(), model_hash: outcome.model.hash(), split: "test", metrics: metrics.clone() });
        rows.push(AblationRow {
            label,
            metrics,
            selected_epoch: outcome.selected_epoch,
            has_ocr: cfg.task_mode.trains_ocr(),
            has_mid: cfg.task_mode.trains_mid(),
        });
    }
    let table = ablation_table(&rows);
    print!("{table}");
    write_text(&rec.output("ablation.txt"), &table)?;
    write_json(&rec.output("ablation.json"), &rows)?;
    write_json(&rec.output("metrics.json"), &records)?;
    rec.finish()?;
    Ok(())
}

fn flops(ctx: &Ctx, a: &FlopsArgs) -> Result<(), Failure> {
    let cfg = ctx.cfg.victor_config(a.preset)?;
    let mut rec = Recorder::new("flops-report", &cfg, ctx.seed, &ctx.out.join("flops"))?;
    let ledger = count_flops(&cfg);
    let rows = efficiency_rows();
    let label = cfg.label(ctx.cfg.misfit.m);
    let table = flops_table(&rows, Some((&label, &ledger)));
    print!("{table}");
    let mean = rows.iter().map(|r| r.reduction()).sum::<f64>() / rows.len() as f64;
    let table_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "row": r,
                "recomputed_reduction": r.reduction(),
                "printed_disagrees": printed_disagrees(r),
            })
        })
        .collect();
    write_json(
        &rec.output("flops.json"),
        &serde_json::json!({ "table": table_rows, "mean_reduction": mean, "victor": { "config": cfg, "ledger": ledger } }),
    )?;
    write_text(&rec.output("flops.txt"), &table)?;
    rec.finish()?;
    Ok(())
}

fn pipeline(a: &PipelineArgs) -> Result<(), Failure> {
    let mut ctx = Ctx::new(&a.common)?;
    if let Some(m) = a.m {
        ctx.cfg.misfit.m = m;
    }
    if let Some(e) = a.flip_epochs {
        ctx.cfg.flip.epochs = e;
    }
    let c = a.common.clone();
    let corpus = generate(&ctx, &UniverseArgs { common: c.clone(), categories: None, archetypes: None, items_per_cell: None, compatible: None, incompatible: None })?;
    let dataset = misfits(&ctx, &MisfitArgs { common: c.clone(), corpus: Some(corpus.clone()), m: a.m, no_incompatible: false })?;
    let source = a.source.unwrap_or(ctx.cfg.features.source);
    let flip_path = if source == Source::Flip {
        Some(flip(&ctx, &FlipArgs { common: c.clone(), corpus: Some(corpus.clone()), epochs: None, batch: None, lr: None })?)
    } else {
        None
    };
    let feats = features(&ctx, &FeatureArgs { common: c.clone(), corpus: Some(corpus), source: Some(source), flip: flip_path, dim: None })?;
    let model = victor(&ctx, &VictorArgs { common: c.clone(), victor: a.victor.clone(), dataset: Some(dataset.clone()), features: Some(feats.clone()) })?;
    eval(
        &ctx,
        &EvalArgs { common: c, victor: a.victor.clone(), model: Some(model), dataset: Some(dataset), features: Some(feats), ablation: false, alphas: None },
    )
}

fn serve(a: &ServeArgs) -> Result<(), Failure> {
    let state = misfitlab_serve::AppState::load(&a.model, &a.catalog, &a.features)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    let addr = std::net::SocketAddr::new(a.bind, a.port);
    rt.block_on(misfitlab_serve::serve(Arc::new(state), addr)).map_err(|e| Failure::runtime(format!("serve on {addr}: {e}")))
}
