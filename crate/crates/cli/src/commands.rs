use std::path::{Path, PathBuf};

use gem2::bench::{run_bench, to_csv, BenchSettings};
use gem2::featurizer::{featurize, parse_jsonl, FeaturizerConfig, MoleculeRecord};
use gem2::model::{load_checkpoint, load_checkpoint_expecting, Gem2Model, ModelConfig};
use gem2::oracle::AttentionKind;
use gem2::synth::{synthetic_dataset, LabelKind, SynthConfig};
use gem2::trainer::{
    self, evaluate, prepare, split_records, EvalReport, LossKind, TrainConfig, TrainOutputs,
};
use serde::{Deserialize, Serialize};

use crate::args::{Command, Label, Loss, Mode};
use crate::cache::featurize_to_dir;
use crate::CliError;

/// Everything one training run needs. Relative paths are resolved against
/// the directory holding the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_data: PathBuf,
    /// Separate validation file; otherwise split from `train_data`.
    #[serde(default)]
    pub valid_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seeds parameter initialisation; `train.seed` drives data order and dropout.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        cfg.train_data = resolve(&cfg.train_data);
        cfg.valid_data = cfg.valid_data.as_deref().map(resolve);
        cfg.output_dir = resolve(&cfg.output_dir);
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    /// The same evaluation with attention restricted by bond distance.
    pub long_range: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectOutput {
    pub molecule: String,
    pub query: Vec<usize>,
    pub block: usize,
    pub axis: usize,
    /// `per_head[h][j]`: weight of the j-th key along the attended axis.
    pub per_head: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct TrainSummary {
    best_epoch: u64,
    best_metric: f64,
    steps: u64,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

/// Reads a JSON-lines dataset, failing on the first bad line.
pub fn load_records(path: &Path) -> Result<Vec<MoleculeRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_jsonl(&text)
        .into_iter()
        .map(|r| r.map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

pub fn run(command: Command) -> Result<String, CliError> {
    let pool = trainer::thread_pool();
    pool.install(|| dispatch(command))
}

fn dispatch(command: Command) -> Result<String, CliError> {
    match command {
        Command::Featurize {
            input,
            out_dir,
            skip_bad,
            featurizer,
        } => {
            let config = match featurizer {
                Some(p) => read_json(&p)?,
                None => FeaturizerConfig::default(),
            };
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let manifest = featurize_to_dir(&text, &out_dir, &config, skip_bad)?;
            for s in &manifest.skipped {
                eprintln!("skipped line {}: {}", s.line, s.error);
            }
            Ok(format!(
                "featurized {} molecules ({} unchanged, {} skipped) into {}\n",
                manifest.entries.len(),
                manifest.reused,
                manifest.skipped.len(),
                out_dir.display()
            ))
        }
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            dataset,
            group_topo,
            long_range_level,
            config,
            loss,
        } => {
            let (model, run_loss) = match config {
                Some(p) => {
                    let run = RunConfig::load(&p)?;
                    (
                        load_checkpoint_expecting(&checkpoint, &run.model)?,
                        Some(run.train.loss),
                    )
                }
                None => (load_checkpoint(&checkpoint)?, None),
            };
            let loss = match loss {
                Some(Loss::L1) => LossKind::L1,
                Some(Loss::BinaryCrossEntropy) => LossKind::BinaryCrossEntropy,
                None => run_loss.unwrap_or_default(),
            };
            let examples = prepare(&load_records(&dataset)?, &model.config().features)?;
            let report = evaluate(&model, &examples, loss, group_topo)?;
            let long_range = match long_range_level {
                Some(k) => Some(evaluate(
                    &model.with_long_range_level(Some(k))?,
                    &examples,
                    loss,
                    group_topo,
                )?),
                None => None,
            };
            Ok(pretty(&EvalOutput { report, long_range }))
        }
        Command::Bench {
            orders,
            sizes,
            mode,
            channels,
            repetitions,
        } => {
            let kind = match mode {
                Mode::Axial => AttentionKind::Axial,
                Mode::Full => AttentionKind::Full,
            };
            let settings = BenchSettings {
                channels,
                repetitions,
                ..BenchSettings::default()
            };
            Ok(to_csv(&run_bench(kind, &orders, &sizes, &settings)?))
        }
        Command::InspectAttention {
            checkpoint,
            molecule,
            query,
            block,
            axis,
            id,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let records = load_records(&molecule)?;
            let record = match &id {
                Some(id) => records
                    .iter()
                    .find(|r| &r.id == id)
                    .ok_or_else(|| CliError::Input(format!("no molecule with id {id:?}")))?,
                None => records.first().ok_or_else(|| {
                    CliError::Input(format!("{} holds no molecule", molecule.display()))
                })?,
            };
            let features = featurize(record, &model.config().features)?;
            let row = model.attention_weights(&features, &query, block, axis)?;
            Ok(pretty(&InspectOutput {
                molecule: record.id.clone(),
                query,
                block,
                axis,
                per_head: row.per_head,
                mean: row.mean,
            }))
        }
        Command::Synth {
            count,
            min_atoms,
            max_atoms,
            label,
            seed,
            out,
        } => {
            if min_atoms == 0 || max_atoms < min_atoms {
                return Err(CliError::Input("need 1 <= min-atoms <= max-atoms".into()));
            }
            let label = match label {
                Label::AngleMix => LabelKind::AngleMix,
                Label::BondLength => LabelKind::BondLength,
                Label::Binary => LabelKind::Binary,
            };
            let records = synthetic_dataset(&SynthConfig {
                count,
                min_atoms,
                max_atoms,
                label,
                seed,
            });
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r).expect("record serializes"));
                text.push('\n');
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
                    Ok(format!(
                        "wrote {} molecules to {}\n",
                        records.len(),
                        path.display()
                    ))
                }
                None => Ok(text),
            }
        }
    }
}

fn train(config_path: &Path) -> Result<String, CliError> {
    let run = RunConfig::load(config_path)?;
    run.train.validate()?;
    let model = Gem2Model::new(run.model.clone(), run.seed)?;
    let records = load_records(&run.train_data)?;
    let (train_recs, valid_recs) = match &run.valid_data {
        Some(p) => (records, load_records(p)?),
        None => split_records(&records, run.train.valid_fraction, run.train.seed),
    };
    let features = &model.config().features;
    let train_set = prepare(&train_recs, features)?;
    let valid_set = prepare(&valid_recs, features)?;
    std::fs::create_dir_all(&run.output_dir).map_err(|e| CliError::io(&run.output_dir, e))?;
    let resolved = run.output_dir.join("config.json");
    std::fs::write(&resolved, pretty(&run)).map_err(|e| CliError::io(&resolved, e))?;
    let outputs = TrainOutputs {
        dir: run.output_dir.clone(),
    };
    let outcome = trainer::train(model, &train_set, &valid_set, &run.train, Some(&outputs))?;
    Ok(pretty(&TrainSummary {
        best_epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        steps: outcome.state.step,
        checkpoint: outputs.checkpoint_path(),
        metrics: outputs.metrics_path(),
    }))
}
