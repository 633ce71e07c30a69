//! Optimisation loop, dataset preparation and evaluation.

mod metrics;
mod optim;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    grouped_mae, mean_absolute_error, roc_auc, topo_bin, BinReport, GroupedReport, TopoBin,
};
pub use optim::{lr_at, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::featurizer::{
    featurize, FeatureError, FeatureSet, FeaturizerConfig, MoleculeRecord, Split,
};
use crate::model::{save_checkpoint, splitmix64, Gem2Model, ModelError, RunMode};
use crate::tensor::{Graph, Precision, Tensor, TensorError};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GEM2_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training diverged at step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    Divergence {
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error("{0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: u32,
    /// Fraction of `base_lr` the warm-up starts from.
    pub warmup_start: f64,
    pub hold_epochs: u32,
    pub decay_interval: u32,
    pub decay_factor: f64,
    pub total_epochs: u32,
    /// Stop after this many optimiser steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub ema_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Validation share when the dataset declares no splits.
    pub valid_fraction: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::quantum()
    }
}

impl TrainConfig {
    /// Regression preset: batch 512, learning rate 4e-4, L1 loss.
    pub fn quantum() -> Self {
        Self {
            batch_size: 512,
            base_lr: 4e-4,
            warmup_epochs: 10,
            warmup_start: 0.01,
            hold_epochs: 40,
            decay_interval: 10,
            decay_factor: 0.5,
            total_epochs: 100,
            max_steps: None,
            ema_decay: 0.999,
            loss: LossKind::L1,
            seed: 0,
            valid_fraction: 0.1,
            precision: Precision::Double,
        }
    }

    /// Classification preset: batch 256, learning rate 2e-4, cross-entropy.
    pub fn drug() -> Self {
        Self {
            batch_size: 256,
            base_lr: 2e-4,
            loss: LossKind::BinaryCrossEntropy,
            ..Self::quantum()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.warmup_epochs == 0 || self.decay_interval == 0 {
            return bad("warmup_epochs and decay_interval must be positive");
        }
        if !(self.warmup_start > 0.0 && self.warmup_start <= 1.0) {
            return bad("warmup_start must lie in (0, 1]");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A featurized molecule with its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureSet,
    pub label: f64,
    /// Bond-graph diameter.
    pub diameter: u32,
}

impl Example {
    pub fn new(record: &MoleculeRecord, config: &FeaturizerConfig) -> Result<Self, FeatureError> {
        let features = featurize(record, config)?;
        let diameter = features.topo.max_finite();
        Ok(Self {
            id: record.id.clone(),
            features,
            label: record.label,
            diameter,
        })
    }
}

/// Featurizes records in parallel, preserving order.
pub fn prepare(
    records: &[MoleculeRecord],
    config: &FeaturizerConfig,
) -> Result<Vec<Example>, FeatureError> {
    records
        .par_iter()
        .map(|r| Example::new(r, config))
        .collect()
}

/// Train/validation partition: declared splits when any record has one
/// (test records are left out), else a seeded random `valid_fraction`.
pub fn split_records(
    records: &[MoleculeRecord],
    valid_fraction: f64,
    seed: u64,
) -> (Vec<MoleculeRecord>, Vec<MoleculeRecord>) {
    if records.iter().any(|r| r.split.is_some()) {
        let pick = |s: Split| {
            records
                .iter()
                .filter(|r| r.split == Some(s))
                .cloned()
                .collect()
        };
        return (pick(Split::Train), pick(Split::Valid));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED)));
    let mut n_valid = (records.len() as f64 * valid_fraction).ceil() as usize;
    if records.len() >= 2 {
        n_valid = n_valid.clamp(usize::from(valid_fraction > 0.0), records.len() - 1);
    } else {
        n_valid = 0;
    }
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| records[i].clone()).collect(),
        valid_idx.iter().map(|&i| records[i].clone()).collect(),
    )
}

/// Thread pool sized by `GEM2_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// Loss and parameter gradients for one example.
pub fn example_gradient(
    model: &Gem2Model,
    example: &Example,
    loss: LossKind,
    precision: Precision,
    mode: RunMode,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut g = Graph::with_precision(precision);
    let vars = model.bind(&mut g, true);
    let out = model.forward(&mut g, &vars, &example.features, mode, None)?;
    let l = match loss {
        LossKind::L1 => g.l1_loss(out.prediction, example.label)?,
        LossKind::BinaryCrossEntropy => g.bce_with_logits(out.prediction, example.label)?,
    };
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), grads.take_all(&vars)))
}

/// Evaluation-mode predictions, in input order.
pub fn predict_all(
    model: &Gem2Model,
    examples: &[Example],
    precision: Precision,
) -> Result<Vec<f64>, ModelError> {
    examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::with_precision(precision);
            let vars = model.bind(&mut g, false);
            let out = model.forward(&mut g, &vars, &ex.features, RunMode::eval(), None)?;
            Ok(g.value(out.prediction).item())
        })
        .collect()
}

/// MAE for L1 training, ROC-AUC for cross-entropy.
pub fn validation_metric(loss: LossKind, pred: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    match loss {
        LossKind::L1 => Ok(mean_absolute_error(pred, labels)),
        LossKind::BinaryCrossEntropy => roc_auc(pred, labels),
    }
}

fn improves(loss: LossKind, candidate: f64, best: Option<f64>) -> bool {
    match (loss, best) {
        (_, None) => true,
        (LossKind::L1, Some(b)) => candidate < b,
        (LossKind::BinaryCrossEntropy, Some(b)) => candidate > b,
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_ms: u64,
}

/// Where training artifacts go.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the EMA parameters of the best validation epoch.
    pub best: Gem2Model,
    pub best_epoch: u64,
    pub best_metric: f64,
    pub state: TrainState,
    pub log: Vec<MetricRecord>,
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(TensorError::NonFinite { .. }))
}

/// Mini-batch training with per-epoch validation on the EMA parameters.
///
/// Batch order depends only on `(seed, epoch)`; per-example gradients are
/// computed in parallel and summed in batch order.
pub fn train(
    model: Gem2Model,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    for ex in train_set.iter().chain(valid_set) {
        model.check_features(&ex.features)?;
    }
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
        std::fs::write(o.metrics_path(), b"").map_err(io_err(&o.metrics_path()))?;
    }
    let pool = thread_pool();
    let start = Instant::now();
    let valid_labels: Vec<f64> = valid_set.iter().map(|e| e.label).collect();
    let mut state = TrainState::new(model.params().clone());
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    let mut best: Option<(f64, u64, Gem2Model)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut done = false;
    for epoch in 0..cfg.total_epochs as u64 {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(
            cfg.seed ^ splitmix64(epoch),
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(epoch as f64 + b as f64 / steps_per_epoch as f64, cfg);
            let current = model.with_params(state.params.clone())?;
            let step = state.step;
            let results: Vec<Result<(f64, Vec<Tensor>), ModelError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let seed =
                            splitmix64(cfg.seed ^ splitmix64(step) ^ splitmix64(!(i as u64)));
                        example_gradient(
                            &current,
                            &train_set[i],
                            cfg.loss,
                            cfg.precision,
                            RunMode::train(seed),
                        )
                    })
                    .collect()
            });
            let scale = 1.0 / batch.len() as f64;
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, grads) = match r {
                    Ok(v) => v,
                    Err(e) if is_divergence(&e) => {
                        return Err(TrainError::Divergence { step, last_good });
                    }
                    Err(e) => return Err(e.into()),
                };
                if !l.is_finite() {
                    return Err(TrainError::Divergence { step, last_good });
                }
                batch_loss += l * scale;
                match &mut total {
                    None => {
                        total = Some(
                            grads
                                .into_iter()
                                .map(|mut g| {
                                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                                    g
                                })
                                .collect(),
                        )
                    }
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y * scale;
                            }
                        }
                    }
                }
            }
            match state.adam_step(&total.expect("non-empty batch"), lr) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { .. }) => {
                    return Err(TrainError::Divergence { step, last_good });
                }
                Err(e) => return Err(e),
            }
            state.ema_update(cfg.ema_decay);
            loss_sum += batch_loss;
            batches += 1;
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                done = true;
                break;
            }
        }
        let eval_model = model.with_params(state.ema_params())?;
        let pred = pool.install(|| predict_all(&eval_model, valid_set, cfg.precision));
        let pred = match pred {
            Ok(p) => p,
            Err(e) if is_divergence(&e) => {
                return Err(TrainError::Divergence {
                    step: state.step,
                    last_good,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let val_metric = validation_metric(cfg.loss, &pred, &valid_labels)?;
        let record = MetricRecord {
            epoch,
            step: state.step,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_metric,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(o) = outputs {
            let path = o.metrics_path();
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            let line = serde_json::to_string(&record).expect("metric record serializes");
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        log.push(record);
        if improves(cfg.loss, val_metric, best.as_ref().map(|b| b.0)) {
            if let Some(o) = outputs {
                save_checkpoint(&eval_model, &o.checkpoint_path())?;
                last_good = Some(o.checkpoint_path());
            }
            best = Some((val_metric, epoch, eval_model));
        }
        if done {
            break;
        }
    }
    let (best_metric, best_epoch, best) =
        best.ok_or(TrainError::Config("no epochs were run".into()))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        state,
        log,
    })
}

/// Metrics of a model on a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub loss: LossKind,
    /// MAE or ROC-AUC depending on `loss`.
    pub metric: f64,
    pub grouped: Option<GroupedReport>,
    pub long_range_level: Option<u32>,
}

pub fn evaluate(
    model: &Gem2Model,
    examples: &[Example],
    loss: LossKind,
    group_topo: bool,
) -> Result<EvalReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let pred = predict_all(model, examples, Precision::Double)?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let diameters: Vec<u32> = examples.iter().map(|e| e.diameter).collect();
    Ok(EvalReport {
        count: examples.len(),
        loss,
        metric: validation_metric(loss, &pred, &labels)?,
        grouped: group_topo.then(|| grouped_mae(&pred, &labels, &diameters)),
        long_range_level: model.config().long_range_level,
    })
}
