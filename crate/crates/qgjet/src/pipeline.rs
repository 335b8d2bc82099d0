//! Dataset splitting and multi-seed training shared by `train` and `sweep`.

use qgjet_core::models::Classifier;
use qgjet_core::rng::{shuffle, stream, Domain};
use qgjet_core::tensor::ParameterRegistry;
use qgjet_core::train::{aggregate_seeds, fit, measure_inference_ms, Clock, EpochRecord, Executor, FitContext, MetricReport, RunRecord, Sample, TrainError};
use qgjet_core::Label;

use crate::config::RunConfig;
use crate::report::MetricsRow;

pub const INFERENCE_WARMUP: usize = 5;
pub const INFERENCE_RUNS: usize = 30;

/// Stratified split: each class sends `round(n_c · val_fraction)` of its
/// windows (at least one, never all) to validation; order follows a seeded
/// shuffle.
pub fn split(samples: &[Sample], val_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, label) in Label::ALL.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        shuffle(&mut idx, &mut stream(seed, Domain::Split, 0, k as u64));
        let n_val = if idx.len() < 2 { 0 } else { ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1) };
        val.extend(idx[..n_val].iter().map(|&i| samples[i].clone()));
        train.extend(idx[n_val..].iter().map(|&i| samples[i].clone()));
    }
    (train, val)
}

/// The first `ceil(fraction · n)` windows of a seeded permutation; a fraction
/// of 1 keeps the whole set in its original order.
pub fn subsample(samples: &[Sample], fraction: f64, seed: u64) -> Vec<Sample> {
    if fraction >= 1.0 {
        return samples.to_vec();
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    shuffle(&mut idx, &mut stream(seed, Domain::Split, 1, 0));
    let keep = ((samples.len() as f64 * fraction).ceil() as usize).clamp(1, samples.len().max(1));
    idx.truncate(keep);
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

pub struct SeedRun {
    pub model: Classifier,
    pub best: ParameterRegistry<f32>,
    pub record: RunRecord,
    /// Best-epoch validation metrics with the measured inference time.
    pub report: MetricReport,
}

pub struct TrainOutcome {
    pub row: MetricsRow,
    pub runs: Vec<SeedRun>,
}

/// One `fit` per configured seed, then the seed aggregate as a table row.
pub fn train_seeds(
    name: &str,
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    exec: &dyn Executor,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(u64, &EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let seeds = &cfg.train.seeds;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let used = subsample(train, cfg.dataset_fraction, seed);
        let mut cb = |e: &EpochRecord| on_epoch(seed, e);
        let out = fit(&used, val, &cfg.spec, &cfg.train, seed, FitContext { clock, exec, on_epoch: Some(&mut cb) })?;
        let mut report = out.record.best().report.clone();
        report.inference_ms_per_image = measure_inference_ms(&out.model, &out.best, clock, INFERENCE_WARMUP, INFERENCE_RUNS)?;
        runs.push(SeedRun { model: out.model, best: out.best, record: out.record, report });
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    let agg = aggregate_seeds(&reports, seeds.len())?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let params = runs.first().map_or(0, |r| r.record.total_params);
    Ok(TrainOutcome { row: MetricsRow::new(name, &agg, params, &records), runs })
}
