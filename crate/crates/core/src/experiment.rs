//! Command implementations behind the `ahbn` binary. Every command writes a
//! deterministic `metrics.json`; wall-clock measurements go to a separate
//! `timing.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::losses::LandmarkTarget;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::gradcheck::{grad_check, GradCheckReport};
use crate::model::train::{train_model, EpochLog, TrainSample};
use crate::model::{build_toy_model, LossBreakdown, Stage, ToyModel, Variant};
use crate::retrieval::{
    attribute_map, exclude_self, landmark_nme, rank_queries, subset_accuracy, topk_accuracy, Gallery, RetrievalReport,
};
use crate::sketch::{cbp_vector, make_sketch_params, outer_sketch_oracle, project};
use crate::synth::{generate_dataset, read_manifest, save_dataset, Dataset, Manifest, SampleRecord, Split};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATA_DIR: &str = "data";

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

impl Timing {
    fn single(name: &str, seconds: f64) -> Self {
        Timing { seconds: BTreeMap::from([(name.to_string(), seconds)]) }
    }
}

/// Loads the dataset from `data` (a directory of split manifests) or
/// generates it from the config.
pub struct LoadedData {
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Queries are the gallery images themselves.
    pub same_domain: bool,
}

impl From<Dataset> for LoadedData {
    fn from(d: Dataset) -> Self {
        LoadedData {
            train: d.train,
            query: d.query,
            gallery: d.gallery,
            confusable_pairs: d.confusable_pairs,
            same_domain: false,
        }
    }
}

pub fn load_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<LoadedData> {
    let Some(dir) = data else {
        return Ok(generate_dataset(&cfg.synth)?.into());
    };
    let read = |split: Split| -> Result<Option<Manifest>> {
        let p = dir.join(split.file_name());
        if p.exists() {
            read_manifest(p).map(Some)
        } else {
            Ok(None)
        }
    };
    let gallery = read(Split::Gallery)?
        .ok_or_else(|| Error::Config(format!("{} has no {}", dir.display(), Split::Gallery.file_name())))?;
    let train = read(Split::Train)?.map(|m| m.records).unwrap_or_default();
    let (query, same_domain) = match read(Split::Query)? {
        Some(q) => (q.records, false),
        None => (gallery.records.clone(), true),
    };
    Ok(LoadedData { train, query, gallery: gallery.records, confusable_pairs: gallery.confusable_pairs, same_domain })
}

pub fn train_samples(records: &[SampleRecord], model: &ToyModel) -> Result<Vec<TrainSample>> {
    let classes = model.config().num_classes;
    records.iter().map(|r| r.to_train_sample(classes, model.heatmap_size())).collect()
}

/// Builds and trains `variant` on `records`.
pub fn train_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    records: &[SampleRecord],
) -> Result<(ToyModel, Vec<EpochLog>)> {
    let mut model = build_toy_model(&cfg.variant_arch(variant), cfg.seed)?;
    let samples = train_samples(records, &model)?;
    let log = train_model(&mut model, &samples, &cfg.train)?;
    Ok((model, log))
}

pub fn loss_curve_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,lr,total,id,attribute,landmark\n");
    for e in log {
        let stage = match e.stage {
            Stage::Attribute => "attribute",
            Stage::Landmark => "landmark",
            Stage::Full => "joint",
        };
        let l = e.loss;
        writeln!(s, "{stage},{},{},{},{},{},{}", e.epoch, e.lr, l.total, l.id, l.attribute, l.landmark)
            .expect("string write");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub num_parameters: usize,
    pub train_samples: usize,
    pub epochs: usize,
    pub final_loss: LossBreakdown,
}

pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, out: &Path) -> Result<(TrainReport, Timing)> {
    prepare_out(cfg, out)?;
    let loaded = load_data(cfg, data)?;
    if loaded.train.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let start = Instant::now();
    let (model, log) = train_variant(cfg, cfg.variant, &loaded.train)?;
    let timing = Timing::single("train", start.elapsed().as_secs_f64());
    save_checkpoint(&model, out.join(CHECKPOINT_DIR))?;
    let path = out.join(LOSS_CURVE_FILE);
    fs::write(&path, loss_curve_csv(&log)).map_err(|e| Error::io(path, e))?;
    let report = TrainReport {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        variant: cfg.variant,
        num_parameters: model.params().num_scalars(),
        train_samples: loaded.train.len(),
        epochs: log.len(),
        final_loss: log.last().map(|e| e.loss).unwrap_or_default(),
    };
    write_json(out.join(METRICS_FILE), &report)?;
    write_json(out.join(TIMING_FILE), &timing)?;
    Ok((report, timing))
}

/// Retrieval evaluation of `model`: queries against the gallery, plus
/// attribute mAP and landmark NME over the queries.
pub fn evaluate(
    model: &ToyModel,
    data: &LoadedData,
    eval: &EvalConfig,
    config_hash: String,
    seed: u64,
) -> Result<RetrievalReport> {
    let embed =
        |recs: &[SampleRecord]| -> Result<Vec<_>> { recs.iter().map(|r| model.forward_embed(&r.image)).collect() };
    let gallery_out = embed(&data.gallery)?;
    let query_out = embed(&data.query)?;
    let gallery = Gallery::new(
        gallery_out.iter().map(|o| o.embedding.data().to_vec()).collect(),
        data.gallery.iter().map(|r| r.item_id).collect(),
    )?;
    let queries: Vec<Vec<f64>> = query_out.iter().map(|o| o.embedding.data().to_vec()).collect();
    let mut ranked = rank_queries(&queries, &gallery)?;
    if data.same_domain && eval.exclude_self {
        let own: Vec<usize> = (0..ranked.len()).collect();
        exclude_self(&mut ranked, &own)?;
    }
    let query_ids: Vec<usize> = data.query.iter().map(|r| r.item_id).collect();
    let topk = topk_accuracy(&ranked, &query_ids, gallery.item_ids(), &eval.ks)?;
    if topk.unmatched > 0 {
        eprintln!("warning: {} queries have no gallery match and were excluded", topk.unmatched);
    }
    let confusable: BTreeSet<usize> = data.confusable_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let confusable_acc_at_k = if confusable.is_empty() {
        None
    } else {
        subset_accuracy(&topk, |q| confusable.contains(&query_ids[q]), &eval.ks)
    };

    let scores: Vec<Vec<f64>> = query_out.iter().map(|o| o.attr_scores.data().to_vec()).collect();
    let bits: Vec<Vec<bool>> = data.query.iter().map(|r| r.attributes.clone()).collect();
    let ap = attribute_map(&scores, &bits)?;

    let nme = match query_out.first().and_then(|o| o.heatmaps.as_ref()) {
        Some(first) => {
            let (_, hm, _) = first.dims3()?;
            let targets = data
                .query
                .iter()
                .map(|r| {
                    let vis = r.landmarks.iter().map(|k| k.visible).collect();
                    LandmarkTarget::from_coords(r.heatmap_coords(hm)?, vis, (hm, hm), crate::synth::HEATMAP_SIGMA)
                })
                .collect::<Result<Vec<_>>>()?;
            let preds: Vec<Tensor> = query_out.iter().map(|o| o.heatmaps.clone().expect("two-branch")).collect();
            landmark_nme(&preds, &targets.iter().collect::<Vec<_>>())?
        }
        None => Vec::new(),
    };

    let alphas = (eval.export_alphas && query_out.iter().all(|o| o.alphas.is_some())).then(|| {
        query_out
            .iter()
            .map(|o| {
                let (a, l) = o.alphas.as_ref().expect("checked");
                (a.data().to_vec(), l.data().to_vec())
            })
            .collect()
    });

    Ok(RetrievalReport {
        acc_at_k: topk.acc_at_k,
        nme,
        attribute_ap: ap.ap,
        map: ap.map,
        config_hash,
        seed,
        ranks: topk.ranks,
        unmatched_queries: topk.unmatched,
        excluded_attributes: ap.excluded,
        confusable_acc_at_k,
        alphas,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<RetrievalReport> {
    prepare_out(cfg, out)?;
    let model = load_checkpoint(checkpoint)?;
    let loaded = load_data(cfg, data)?;
    let report = evaluate(&model, &loaded, &cfg.eval, cfg.config_hash(), cfg.seed)?;
    write_json(out.join(METRICS_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub acc_at_k: BTreeMap<usize, f64>,
    pub confusable_acc_at_k: Option<BTreeMap<usize, f64>>,
    pub map: Option<f64>,
    pub mean_nme: Option<f64>,
    pub final_loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text comparison table.
    pub fn table(&self, ks: &[usize]) -> String {
        let mut s = format!("{:<20}", "variant");
        for k in ks {
            write!(s, " {:>7}", format!("acc@{k}")).expect("string write");
        }
        s.push_str("  conf@1     mAP    NME\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for r in &self.rows {
            write!(s, "{:<20}", r.variant.name()).expect("string write");
            for k in ks {
                write!(s, " {:>7.3}", r.acc_at_k.get(k).copied().unwrap_or(f64::NAN)).expect("string write");
            }
            let conf = r.confusable_acc_at_k.as_ref().and_then(|m| m.get(&1).copied());
            writeln!(s, "  {:>6} {:>7} {:>6}", opt(conf), opt(r.map), opt(r.mean_nme)).expect("string write");
        }
        s
    }

    pub fn csv(&self, ks: &[usize]) -> String {
        let mut s = String::from("variant");
        for k in ks {
            write!(s, ",acc@{k}").expect("string write");
        }
        s.push_str(",confusable_acc@1,map,mean_nme\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            s.push_str(r.variant.name());
            for k in ks {
                write!(s, ",{}", opt(r.acc_at_k.get(k).copied())).expect("string write");
            }
            let conf = r.confusable_acc_at_k.as_ref().and_then(|m| m.get(&1).copied());
            writeln!(s, ",{},{},{}", opt(conf), opt(r.map), opt(r.mean_nme)).expect("string write");
        }
        s
    }
}

/// Trains and evaluates every variant on one dataset.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    data: &LoadedData,
) -> Result<(AblationReport, Vec<Vec<EpochLog>>, Timing)> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut logs = Vec::with_capacity(variants.len());
    let mut timing = Timing { seconds: BTreeMap::new() };
    for &variant in variants {
        let start = Instant::now();
        let (model, log) = train_variant(cfg, variant, &data.train)?;
        timing.seconds.insert(format!("train/{variant}"), start.elapsed().as_secs_f64());
        let report = evaluate(&model, data, &cfg.eval, cfg.config_hash(), cfg.seed)?;
        let visible: Vec<f64> = report.nme.iter().flatten().copied().collect();
        rows.push(AblationRow {
            variant,
            acc_at_k: report.acc_at_k,
            confusable_acc_at_k: report.confusable_acc_at_k,
            map: report.map,
            mean_nme: (!visible.is_empty()).then(|| visible.iter().sum::<f64>() / visible.len() as f64),
            final_loss: log.last().map(|e| e.loss).unwrap_or_default(),
        });
        logs.push(log);
    }
    Ok((AblationReport { config_hash: cfg.config_hash(), seed: cfg.seed, rows }, logs, timing))
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    data: Option<&Path>,
    out: &Path,
) -> Result<(AblationReport, Timing)> {
    prepare_out(cfg, out)?;
    let loaded = load_data(cfg, data)?;
    let (report, logs, timing) = run_ablation(cfg, variants, &loaded)?;
    for (v, log) in variants.iter().zip(&logs) {
        let path = out.join(format!("loss_curve_{v}.csv"));
        fs::write(&path, loss_curve_csv(log)).map_err(|e| Error::io(path, e))?;
    }
    let path = out.join("ablation.csv");
    fs::write(&path, report.csv(&cfg.eval.ks)).map_err(|e| Error::io(path, e))?;
    write_json(out.join(METRICS_FILE), &report)?;
    write_json(out.join(TIMING_FILE), &timing)?;
    Ok((report, timing))
}

/// A rendered image moved off exact zeros: `0.9·x + 0.05 + U[0, 0.02)`.
pub fn generic_image(image: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e0e_71c1);
    let data = image.data().iter().map(|&v| 0.9 * v + 0.05 + rng.gen_range(0.0..0.02)).collect();
    Tensor::new(image.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckMetrics {
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub report: GradCheckReport,
}

/// Gradient check of the configured variant on the first training render.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckMetrics> {
    let model = build_toy_model(&cfg.variant_arch(cfg.variant), cfg.seed)?;
    let spec = crate::synth::SynthSpec { num_items: 1, renders_per_item: 1, queries_per_item: 1, ..cfg.synth.clone() };
    let record = generate_dataset(&spec)?.train.remove(0);
    let image = generic_image(&record.image, cfg.seed)?;
    let targets = record.targets(model.config().num_classes, model.heatmap_size())?;
    let report = grad_check(&model, &image, &targets, cfg.train.weights(), &cfg.gradcheck)?;
    Ok(GradCheckMetrics { config_hash: cfg.config_hash(), seed: cfg.seed, variant: cfg.variant, report })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<GradCheckMetrics> {
    prepare_out(cfg, out)?;
    let metrics = run_gradcheck(cfg)?;
    write_json(out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub input_dim: usize,
    pub sketch_dim: usize,
    pub trials: usize,
    pub true_inner: f64,
    pub mean_estimate: f64,
    pub mean_error: f64,
    /// Standard error of the mean estimate; absent for a single trial.
    pub std_error: Option<f64>,
    pub rmse: f64,
    pub within_3se: Option<bool>,
    /// Largest deviation of the FFT route from the explicit outer-product sketch.
    pub oracle_max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchBenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    /// RMSE is nonincreasing in the sketch dimension for every input size.
    pub error_nonincreasing: bool,
}

fn trial_seed(seed: u64, c: usize, d: usize, t: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [c as u64, d as u64, t as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    h
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Monte Carlo statistics of the sketched inner product `⟨Ψ(x), Ψ(y)⟩` for
/// fixed `x, y`, one independent sketch per trial.
pub fn sketch_statistics(c: usize, d: usize, trials: usize, seed: u64) -> Result<BenchRow> {
    if c == 0 || d == 0 || trials == 0 {
        return Err(Error::Argument("sketch statistics need positive sizes and trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ c as u64);
    let x = random_vector(&mut rng, c);
    let y = random_vector(&mut rng, c);
    let truth: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let mut estimates = Vec::with_capacity(trials);
    for t in 0..trials {
        let p = make_sketch_params(c, d, trial_seed(seed, c, d, t))?;
        let (px, py) = (project(&x, &p)?, project(&y, &p)?);
        estimates.push(px.iter().zip(&py).map(|(a, b)| a * b).sum::<f64>());
    }
    let n = trials as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let std_error = (trials > 1).then(|| {
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    let rmse = (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n).sqrt();
    let p1 = make_sketch_params(c, d, trial_seed(seed, c, d, usize::MAX))?;
    let p2 = make_sketch_params(c, d, trial_seed(seed, c, d, usize::MAX - 1))?;
    let fast = cbp_vector(&x, &y, &p1, &p2)?;
    let slow = outer_sketch_oracle(&x, &y, &p1, &p2)?;
    let oracle_max_abs_diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(BenchRow {
        input_dim: c,
        sketch_dim: d,
        trials,
        true_inner: truth,
        mean_estimate: mean,
        mean_error: mean - truth,
        std_error,
        rmse,
        within_3se: std_error.map(|se| (mean - truth).abs() <= 3.0 * se),
        oracle_max_abs_diff,
    })
}

fn time_per_call(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let reps = 50;
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

pub fn run_sketch_bench(cfg: &ExperimentConfig) -> Result<(SketchBenchReport, Timing)> {
    let b = &cfg.bench;
    let mut dims = b.sketch_dims.clone();
    dims.sort_unstable();
    dims.dedup();
    let mut rows = Vec::new();
    let mut timing = Timing { seconds: BTreeMap::new() };
    let mut error_nonincreasing = true;
    for &c in &b.input_dims {
        let mut last = f64::INFINITY;
        for &d in &dims {
            let row = sketch_statistics(c, d, b.trials, cfg.seed)?;
            error_nonincreasing &= row.rmse <= last;
            last = row.rmse;
            rows.push(row);

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (x, y) = (random_vector(&mut rng, c), random_vector(&mut rng, c));
            let (p1, p2) = (make_sketch_params(c, d, 1)?, make_sketch_params(c, d, 2)?);
            let sketch = time_per_call(|| cbp_vector(&x, &y, &p1, &p2).map(drop))?;
            let outer = time_per_call(|| {
                let full: Vec<f64> = x.iter().flat_map(|a| y.iter().map(move |b| a * b)).collect();
                std::hint::black_box(full);
                Ok(())
            })?;
            timing.seconds.insert(format!("cbp/C={c}/d={d}"), sketch);
            timing.seconds.insert(format!("outer/C={c}/d={d}"), outer);
        }
    }
    let report = SketchBenchReport { config_hash: cfg.config_hash(), seed: cfg.seed, rows, error_nonincreasing };
    Ok((report, timing))
}

pub fn cmd_sketch_bench(cfg: &ExperimentConfig, out: &Path) -> Result<(SketchBenchReport, Timing)> {
    prepare_out(cfg, out)?;
    let (report, timing) = run_sketch_bench(cfg)?;
    write_json(out.join(METRICS_FILE), &report)?;
    write_json(out.join(TIMING_FILE), &timing)?;
    Ok((report, timing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub config_hash: String,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    pub confusable_pairs: Vec<(usize, usize)>,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataReport> {
    prepare_out(cfg, out)?;
    let ds = generate_dataset(&cfg.synth)?;
    save_dataset(&ds, out.join(DATA_DIR))?;
    let report = GenDataReport {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        data_dir: PathBuf::from(DATA_DIR),
        train: ds.train.len(),
        query: ds.query.len(),
        gallery: ds.gallery.len(),
        confusable_pairs: ds.confusable_pairs.clone(),
    };
    write_json(out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Threshold misses of a single-model evaluation.
pub fn eval_failures(report: &RetrievalReport, cfg: &ExperimentConfig) -> Vec<String> {
    let top1 = report.acc_at_k.get(&1).copied().unwrap_or(0.0);
    let mut out = Vec::new();
    if top1 < cfg.thresholds.min_top1 {
        out.push(format!("top-1 {top1:.3} < {}", cfg.thresholds.min_top1));
    }
    out
}

/// Threshold misses of an ablation: the full model must reach the top-1
/// target and the single-branch baseline must stay below the confusable cap.
pub fn ablation_failures(report: &AblationReport, cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(full) = report.row(Variant::FullAhbn) {
        let top1 = full.acc_at_k.get(&1).copied().unwrap_or(0.0);
        if top1 < cfg.thresholds.min_top1 {
            out.push(format!("full-ahbn top-1 {top1:.3} < {}", cfg.thresholds.min_top1));
        }
    }
    if let Some(base) = report.row(Variant::SingleBranch) {
        let conf = base.confusable_acc_at_k.as_ref().and_then(|m| m.get(&1).copied()).unwrap_or(1.0);
        if conf > cfg.thresholds.max_baseline_confusable_top1 {
            out.push(format!(
                "single-branch confusable top-1 {conf:.3} > {}",
                cfg.thresholds.max_baseline_confusable_top1
            ));
        }
    }
    out
}

pub fn bench_failures(report: &SketchBenchReport) -> Vec<String> {
    let mut out = Vec::new();
    for r in &report.rows {
        if r.within_3se == Some(false) {
            out.push(format!(
                "C={} d={}: mean error {:.3e} beyond 3 standard errors",
                r.input_dim, r.sketch_dim, r.mean_error
            ));
        }
        if r.oracle_max_abs_diff > 1e-10 {
            out.push(format!(
                "C={} d={}: FFT route deviates by {:.3e}",
                r.input_dim, r.sketch_dim, r.oracle_max_abs_diff
            ));
        }
    }
    if !report.error_nonincreasing {
        out.push("sketch error is not nonincreasing in d".into());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_has_no_standard_error() {
        let row = sketch_statistics(8, 8, 1, 3).unwrap();
        assert_eq!(row.trials, 1);
        assert!(row.std_error.is_none() && row.within_3se.is_none());
    }

    #[test]
    fn sketch_dim_equal_to_input_dim() {
        let row = sketch_statistics(16, 16, 400, 5).unwrap();
        assert!(row.oracle_max_abs_diff <= 1e-12);
        assert_eq!(row.within_3se, Some(true));
    }

    #[test]
    fn generic_image_has_no_zeros() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        let g = generic_image(&img, 0).unwrap();
        assert!(g.data().iter().all(|&v| (0.05..0.07).contains(&v)));
    }

    #[test]
    fn loss_curve_header_and_rows() {
        let log = vec![EpochLog { stage: Stage::Full, epoch: 0, lr: 0.5, loss: LossBreakdown::default() }];
        assert_eq!(loss_curve_csv(&log), "stage,epoch,lr,total,id,attribute,landmark\njoint,0,0.5,0,0,0,0\n");
    }
}
