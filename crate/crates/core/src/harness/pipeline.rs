//! The train, prune, eval and bench commands.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bench::{bench_model, BenchReport};
use super::checkpoint::Checkpoint;
use super::cifar::load_cifar10;
use super::config::{DataConfig, ExperimentConfig, Proportions, RatioSource};
use super::state::{get_engine, get_metrics, get_model, get_trainer, put_engine, put_metrics, put_model, put_trainer};
use super::synthetic::{synthetic_dataset, SyntheticSpec};
use crate::criteria::{
    allocate_ratios_for_flops, conv_flops, default_fraction_grid, flop_fraction, fp_oneshot_prune, layer_sensitivity,
    RatioPlan, SensitivityCurve,
};
use crate::error::{Error, Result};
use crate::metrics::{csv_writer, emit_metrics, Phase, RunMetrics};
use crate::nn::{evaluate, ConvNet, Dataset, Trainer};
use crate::spp::{RecoveryRecord, SppConfig, SppEngine, SppRun};
use crate::tensor::Tensor;

pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const PRUNE_STATE_FILE: &str = "prune_state.ckpt";
pub const PRUNED_FILE: &str = "pruned.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";
pub const RATIO_PLAN_FILE: &str = "ratio_plan.csv";
pub const RECOVERY_FILE: &str = "recovery.csv";
pub const BENCH_FILE: &str = "bench.csv";

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const RETRAIN_STREAM: u64 = 0x7265_7472_6169_6e00;
const BENCH_STREAM: u64 = 0x6265_6e63_6800_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Spp,
    Fp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Spp => "spp",
            Method::Fp => "fp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Loads the configured dataset. `data_dir` overrides `data.dir` for CIFAR-10.
/// Synthetic data is generated from `seed`: `data.samples` training+validation
/// samples followed by a test split of `data.validation` samples.
pub fn load_data(cfg: &ExperimentConfig, data_dir: Option<&Path>, seed: u64) -> Result<Data> {
    match &cfg.data {
        DataConfig::Cifar10 { dir, validation } => {
            let dir = data_dir
                .map(Path::to_path_buf)
                .or_else(|| dir.clone())
                .ok_or_else(|| Error::Config("CIFAR-10 needs --data-dir or data.dir".into()))?;
            let s = load_cifar10(&dir, *validation)?;
            Ok(Data { train: s.train, validation: s.validation, test: s.test })
        }
        DataConfig::Synthetic { spec, validation } => {
            let all = synthetic_dataset(seed, &SyntheticSpec { samples: spec.samples + validation, ..*spec })?;
            let (rest, test) = all.split_tail(*validation);
            let (train, validation) = rest.split_tail(*validation);
            Ok(Data { train, validation, test })
        }
    }
}

fn accuracy(model: &ConvNet, data: &Dataset, batch: usize) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, data, batch)?.accuracy))
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn put_run_info(ck: &mut Checkpoint, cfg: &ExperimentConfig, seed: u64, stage: &str) {
    ck.put_text("run.config", cfg.to_text());
    ck.put_u64("run.seed", seed);
    ck.put_text("run.stage", stage);
}

fn put_accuracies(ck: &mut Checkpoint, model: &ConvNet, data: &Data, batch: usize) -> Result<(Option<f64>, Option<f64>)> {
    let v = accuracy(model, &data.validation, batch)?;
    let t = accuracy(model, &data.test, batch)?;
    if let Some(v) = v {
        ck.put_f64("eval.validation_accuracy", v);
    }
    if let Some(t) = t {
        ck.put_f64("eval.test_accuracy", t);
    }
    Ok((v, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub metrics: RunMetrics,
    pub checkpoint: PathBuf,
}

/// Trains a baseline from scratch and writes `baseline.ckpt` and `train_metrics.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, data: &Data, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ConvNet::new(cfg.data.input_shape(), &cfg.architecture, &mut rng)?;
    if model.num_classes() != data.train.classes() {
        return Err(Error::Config(format!(
            "model has {} outputs but the dataset has {} classes; change the last fc layer",
            model.num_classes(),
            data.train.classes()
        )));
    }
    let mut trainer = Trainer::new(&model, cfg.train.sgd, &data.train, seed ^ TRAIN_STREAM)?;
    let mut metrics = RunMetrics::default();
    let convs = model.conv_indices().len();
    let steps = trainer.sampler.batches_per_epoch();
    for epoch in 0..cfg.train.epochs {
        let loss = trainer.train_epochs(&mut model, &data.train, 1)?[0];
        let acc = accuracy(&model, &data.validation, cfg.eval_batch)?;
        metrics.push_point((epoch + 1) * steps, Phase::Train, Some(loss), acc, &vec![0.0; convs], &vec![0.0; convs]);
    }
    let mut ck = Checkpoint::new();
    put_run_info(&mut ck, cfg, seed, "trained");
    put_model(&mut ck, &model);
    put_metrics(&mut ck, "metrics", &metrics)?;
    let (v, t) = put_accuracies(&mut ck, &model, data, cfg.eval_batch)?;
    let path = out.join(BASELINE_FILE);
    ck.save(&path)?;
    emit_metrics(&metrics, &out.join(TRAIN_METRICS_FILE))?;
    Ok(TrainSummary { validation_accuracy: v, test_accuracy: t, metrics, checkpoint: path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub recorded_validation_accuracy: Option<f64>,
    pub recorded_test_accuracy: Option<f64>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run `train` first or pass --checkpoint",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Top-1 accuracy of a checkpoint on the validation and test splits.
pub fn cmd_eval(cfg: &ExperimentConfig, data: &Data, checkpoint: &Path) -> Result<EvalSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let model = get_model(&ck)?;
    let recorded = |k: &str| ck.contains(k).then(|| ck.f64(k)).transpose();
    Ok(EvalSummary {
        validation_accuracy: accuracy(&model, &data.validation, cfg.eval_batch)?,
        test_accuracy: accuracy(&model, &data.test, cfg.eval_batch)?,
        recorded_validation_accuracy: recorded("eval.validation_accuracy")?,
        recorded_test_accuracy: recorded("eval.test_accuracy")?,
    })
}

pub fn write_sensitivity(curves: &[SensitivityCurve], path: &Path) -> Result<()> {
    let mut w = csv_writer(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_record(["layer_id", "retained_fraction", "normalized_error"])?;
    for c in curves {
        for (f, e) in c.retained_fraction.iter().zip(&c.normalized_error) {
            w.write_record([c.layer_id.to_string(), f.to_string(), e.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ratio_plan(plan: &RatioPlan, flops: &[f64], path: &Path) -> Result<()> {
    let mut w = csv_writer(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_record([
        "layer_id",
        "proportion",
        "remaining",
        "pruning_ratio",
        "dense_flops",
        "target_speedup",
        "achieved_speedup",
    ])?;
    for (l, ((p, r), f)) in plan.proportions.iter().zip(&plan.remaining).zip(flops).enumerate() {
        w.write_record([
            l.to_string(),
            p.map_or(String::new(), |p| p.to_string()),
            r.to_string(),
            (1.0 - r).to_string(),
            f.to_string(),
            plan.target_speedup.to_string(),
            plan.achieved_speedup.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_recovery(records: &[RecoveryRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_record(["layer_id", "initial_below", "final_above", "recovery_ratio"])?;
    for r in records {
        w.write_record([
            r.layer_id.to_string(),
            r.initial_below.len().to_string(),
            r.final_above.len().to_string(),
            r.recovery_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Remaining-ratio proportions from sensitivity: each layer's mean normalised
/// error over the grid, divided by the smallest such mean. Less redundant layers
/// (higher error) keep proportionally more columns.
pub fn pca_proportions(curves: &[SensitivityCurve]) -> Vec<Option<f64>> {
    let means: Vec<f64> = curves
        .iter()
        .map(|c| c.normalized_error.iter().sum::<f64>() / c.normalized_error.len() as f64)
        .collect();
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    means.iter().map(|m| Some(m / min)).collect()
}

/// Per-layer pruning ratios for a pre-trained model, and the plan behind them.
pub fn plan_ratios(cfg: &ExperimentConfig, model: &ConvNet, curves: &[SensitivityCurve]) -> Result<RatioPlan> {
    let flops = conv_flops(model);
    let layers = flops.len();
    match &cfg.prune.ratios {
        RatioSource::Fixed(r) => {
            let ratios = match r.len() {
                1 => vec![r[0]; layers],
                n if n == layers => r.clone(),
                n => return Err(Error::Config(format!("prune.ratio has {n} entries for {layers} conv layers"))),
            };
            let remaining: Vec<f64> = ratios.iter().map(|r| 1.0 - r).collect();
            let achieved = 1.0 / flop_fraction(&flops, &remaining);
            Ok(RatioPlan {
                proportions: vec![None; layers],
                remaining,
                target_speedup: achieved,
                achieved_speedup: achieved,
            })
        }
        RatioSource::Speedup { target, proportions } => {
            let props = match proportions {
                Proportions::Pca => pca_proportions(curves),
                Proportions::Explicit(p) if p.len() == layers => p.clone(),
                Proportions::Explicit(p) => {
                    return Err(Error::Config(format!(
                        "prune.proportions has {} entries for {layers} conv layers",
                        p.len()
                    )))
                }
            };
            allocate_ratios_for_flops(&props, &flops, *target)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PruneOptions {
    /// Pre-trained checkpoint; defaults to `<out>/baseline.ckpt`.
    pub baseline: Option<PathBuf>,
    /// Continue from a saved `prune_state.ckpt`.
    pub resume: Option<PathBuf>,
    /// Save state and stop once this many pruning iterations have run.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneSummary {
    Stopped {
        iteration: usize,
        state: PathBuf,
    },
    Completed {
        iterations: usize,
        pruned_fractions: Vec<f64>,
        recovery: Vec<(usize, f64)>,
        pruned_accuracy: Option<f64>,
        final_accuracy: Option<f64>,
        test_accuracy: Option<f64>,
        metrics: RunMetrics,
    },
}

fn spp_config(cfg: &ExperimentConfig, ratios: Vec<f64>) -> SppConfig {
    SppConfig {
        params: cfg.prune.schedule,
        ratios,
        max_iterations: cfg.prune.max_iterations,
        eval_every_updates: cfg.prune.eval_every,
        eval_batch: cfg.eval_batch,
    }
}

fn save_prune_state(cfg: &ExperimentConfig, seed: u64, model: &ConvNet, run: &SppRun, ratios: &[f64], path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    put_run_info(&mut ck, cfg, seed, "pruning");
    put_model(&mut ck, model);
    put_trainer(&mut ck, "prune", &run.trainer);
    put_engine(&mut ck, &run.engine.state());
    put_metrics(&mut ck, "metrics", &run.metrics)?;
    ck.put_f64s("prune.ratios", &[ratios.len()], ratios.to_vec());
    ck.put_f64("prune.loss_sum", run.loss_sum);
    ck.put_u64("prune.loss_count", run.loss_count as u64);
    ck.save(path)
}

fn resume_prune_state(cfg: &ExperimentConfig, seed: u64, data: &Data, path: &Path) -> Result<(ConvNet, SppRun, Vec<f64>)> {
    let ck = load_checkpoint(path)?;
    if ck.text("run.stage")? != "pruning" {
        return Err(Error::Config(format!("{} is not a pruning-state checkpoint", path.display())));
    }
    if ck.text("run.config")? != cfg.to_text() || ck.u64("run.seed")? != seed {
        return Err(Error::Config(format!(
            "{} was written with a different config or seed; resume with the original settings",
            path.display()
        )));
    }
    let model = get_model(&ck)?;
    let ratios = ck.f64s("prune.ratios")?.1.to_vec();
    let sc = spp_config(cfg, ratios.clone());
    let engine = SppEngine::restore(&model, sc.params, &sc.ratios, get_engine(&ck)?)?;
    let trainer = get_trainer(&ck, "prune", &model, data.train.len())?;
    let metrics = get_metrics(&ck, "metrics")?;
    let run = SppRun::assemble(engine, trainer, metrics, sc, ck.f64("prune.loss_sum")?, ck.usize("prune.loss_count")?);
    Ok((model, run, ratios))
}

/// Prunes a pre-trained model with SPP (or the one-shot baseline), then retrains.
///
/// Writes `sensitivity.csv`, `ratio_plan.csv`, `pruned.ckpt`, `final.ckpt`,
/// `metrics.csv` and (for SPP) `recovery.csv` under `out`.
pub fn cmd_prune(cfg: &ExperimentConfig, seed: u64, data: &Data, out: &Path, method: Method, opts: &PruneOptions) -> Result<PruneSummary> {
    create_dir(out)?;
    let state_path = out.join(PRUNE_STATE_FILE);
    let val = (!data.validation.is_empty()).then_some(&data.validation);

    let (mut model, mut metrics, recovery) = match (method, &opts.resume) {
        (Method::Fp, Some(_)) => return Err(Error::Config("--resume applies to --method spp only".into())),
        (Method::Spp, Some(path)) => {
            let (mut model, mut run, ratios) = resume_prune_state(cfg, seed, data, path)?;
            match drive_spp(cfg, seed, data, &mut model, &mut run, &ratios, &state_path, opts.stop_after)? {
                Some(stopped) => return Ok(stopped),
                None => finish_spp(run, model, val, out)?,
            }
        }
        (_, None) => {
            let baseline = opts.baseline.clone().unwrap_or_else(|| out.join(BASELINE_FILE));
            let mut model = get_model(&load_checkpoint(&baseline)?)?;
            let curves = model
                .conv_layers()
                .enumerate()
                .map(|(l, c)| layer_sensitivity(l, c, &default_fraction_grid()))
                .collect::<Result<Vec<_>>>()?;
            write_sensitivity(&curves, &out.join(SENSITIVITY_FILE))?;
            let plan = plan_ratios(cfg, &model, &curves)?;
            write_ratio_plan(&plan, &conv_flops(&model), &out.join(RATIO_PLAN_FILE))?;
            let ratios = plan.pruning_ratios();
            match method {
                Method::Fp => {
                    fp_oneshot_prune(&mut model, &ratios)?;
                    let fractions: Vec<f64> = model
                        .conv_masks()
                        .iter()
                        .map(|m| m.iter().filter(|&&k| !k).count() as f64 / m.len() as f64)
                        .collect();
                    let mut metrics = RunMetrics::default();
                    let acc = accuracy(&model, &data.validation, cfg.eval_batch)?;
                    metrics.push_point(0, Phase::Prune, None, acc, &fractions, &fractions);
                    (model, metrics, Vec::new())
                }
                Method::Spp => {
                    let mut run = SppRun::new(&model, &data.train, spp_config(cfg, ratios.clone()), cfg.prune.sgd, seed)?;
                    match drive_spp(cfg, seed, data, &mut model, &mut run, &ratios, &state_path, opts.stop_after)? {
                        Some(stopped) => return Ok(stopped),
                        None => finish_spp(run, model, val, out)?,
                    }
                }
            }
        }
    };

    let mut ck = Checkpoint::new();
    put_run_info(&mut ck, cfg, seed, "pruned");
    ck.put_text("run.method", method.name());
    put_model(&mut ck, &model);
    put_metrics(&mut ck, "metrics", &metrics)?;
    let (pruned_accuracy, _) = put_accuracies(&mut ck, &model, data, cfg.eval_batch)?;
    ck.save(&out.join(PRUNED_FILE))?;

    let fractions: Vec<f64> = model
        .conv_masks()
        .iter()
        .map(|m| m.iter().filter(|&&k| !k).count() as f64 / m.len() as f64)
        .collect();
    metrics.push_point(0, Phase::Retrain, None, pruned_accuracy, &fractions, &fractions);
    let mut trainer = Trainer::new(&model, cfg.retrain.sgd, &data.train, seed ^ RETRAIN_STREAM)?;
    let steps = trainer.sampler.batches_per_epoch();
    for epoch in 0..cfg.retrain.epochs {
        let loss = trainer.train_epochs(&mut model, &data.train, 1)?[0];
        let acc = accuracy(&model, &data.validation, cfg.eval_batch)?;
        metrics.push_point((epoch + 1) * steps, Phase::Retrain, Some(loss), acc, &fractions, &fractions);
    }

    let mut ck = Checkpoint::new();
    put_run_info(&mut ck, cfg, seed, "retrained");
    ck.put_text("run.method", method.name());
    put_model(&mut ck, &model);
    put_metrics(&mut ck, "metrics", &metrics)?;
    let (final_accuracy, test_accuracy) = put_accuracies(&mut ck, &model, data, cfg.eval_batch)?;
    ck.save(&out.join(FINAL_FILE))?;
    emit_metrics(&metrics, &out.join(METRICS_FILE))?;
    if method == Method::Spp {
        write_recovery(&recovery, &out.join(RECOVERY_FILE))?;
    }
    let iterations = metrics
        .records
        .iter()
        .filter(|r| r.phase == Phase::Prune)
        .map(|r| r.iteration)
        .max()
        .unwrap_or(0);
    Ok(PruneSummary::Completed {
        iterations,
        pruned_fractions: fractions,
        recovery: metrics.recovery.clone(),
        pruned_accuracy,
        final_accuracy,
        test_accuracy,
        metrics,
    })
}

#[allow(clippy::too_many_arguments)]
fn drive_spp(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &Data,
    model: &mut ConvNet,
    run: &mut SppRun,
    ratios: &[f64],
    state_path: &Path,
    stop_after: Option<usize>,
) -> Result<Option<PruneSummary>> {
    let val = (!data.validation.is_empty()).then_some(&data.validation);
    let every = cfg.prune.checkpoint_every;
    while !run.is_complete() {
        let i = run.engine.iteration();
        if stop_after == Some(i) {
            save_prune_state(cfg, seed, model, run, ratios, state_path)?;
            return Ok(Some(PruneSummary::Stopped { iteration: i, state: state_path.to_path_buf() }));
        }
        if every > 0 && i > 0 && i % every == 0 {
            save_prune_state(cfg, seed, model, run, ratios, state_path)?;
        }
        run.step(model, &data.train, val)?;
    }
    Ok(None)
}

fn finish_spp(run: SppRun, mut model: ConvNet, val: Option<&Dataset>, out: &Path) -> Result<(ConvNet, RunMetrics, Vec<RecoveryRecord>)> {
    let outcome = run.finish(&mut model, val)?;
    let state = out.join(PRUNE_STATE_FILE);
    if state.exists() {
        std::fs::remove_file(&state).map_err(|e| Error::io(&state, e))?;
    }
    Ok((model, outcome.metrics, outcome.recovery))
}

/// Single-threaded timing of dense vs compacted inference for a checkpoint.
/// Inputs are the first `bench.batch_size` test images (random values when the
/// test split is empty). Writes `bench.csv`.
pub fn cmd_bench(cfg: &ExperimentConfig, seed: u64, data: &Data, checkpoint: &Path, out: &Path) -> Result<BenchReport> {
    create_dir(out)?;
    let model = get_model(&load_checkpoint(checkpoint)?)?;
    let n = cfg.bench.batch_size;
    let shape = model.input_shape();
    let x: Tensor = if data.test.len() >= n {
        data.test.batch(&(0..n).collect::<Vec<_>>()).0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BENCH_STREAM);
        Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0..1.0))
    };
    let report = bench_model(&model, &x, cfg.bench.warmup, cfg.bench.runs)?;
    let path = out.join(BENCH_FILE);
    let mut w = csv_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
    w.write_record([
        "dense_mean_secs",
        "compact_mean_secs",
        "speedup",
        "theoretical_speedup",
        "max_abs_diff",
        "warmup",
        "runs",
        "batch_size",
    ])?;
    w.write_record([
        report.dense.mean_secs.to_string(),
        report.compact.mean_secs.to_string(),
        report.speedup.to_string(),
        report.theoretical_speedup.to_string(),
        report.max_abs_diff.to_string(),
        cfg.bench.warmup.to_string(),
        cfg.bench.runs.to_string(),
        n.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
