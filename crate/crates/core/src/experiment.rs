//! Config-driven multi-seed experiments and ablation sweeps.
//!
//! Run `i` of an experiment uses the sub-seed `derive(base_seed, i)`
//! (splitmix64, see [`crate::seed`]). The sub-seed drives the missing masks and
//! the model initialization; the dataset and the train/val/test split depend
//! only on the dataset source and `base_seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{load_dataset, DataError, Dataset, Mode};
use crate::metrics::{aggregate_runs, report, AggregateReport, MeanStd, MetricError, MetricReport};
use crate::model::Ablation;
use crate::protocol::{self, apply_missing, ProtocolError};
use crate::seed;
use crate::synth::{generate, SynthConfig};
use crate::train::{fit, predict, stratified_split, TrainConfig, TrainError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("missing rate {rate} is not on the grid {grid:?}")]
    RateOffGrid { rate: f64, grid: Vec<f64> },
    #[error("seeds must be at least 1")]
    NoSeeds,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    /// A fully observed feature file, split and masked like synthetic data.
    File { path: PathBuf },
}

fn default_seeds() -> usize {
    5
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    pub r_m: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn mode(&self) -> Mode {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.mode,
            DatasetSource::File { .. } => self.train.model.mode,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds == 0 {
            return Err(ExperimentError::NoSeeds);
        }
        self.train.model.validate().map_err(|e| ExperimentError::Parse {
            path: "train.model".into(),
            message: e.to_string(),
        })?;
        let mode = self.mode();
        if protocol::schedule_lookup(self.r_m, mode).is_err() {
            return Err(ExperimentError::RateOffGrid {
                rate: self.r_m,
                grid: protocol::grid(mode),
            });
        }
        Ok(())
    }

    /// Sub-seed of run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        seed::derive(self.base_seed, i as u64)
    }
}

/// Deserializes JSON, reporting failures with the offending key path.
pub fn parse_strict<T: DeserializeOwned>(json: &str) -> Result<T, ExperimentError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Strict parse: unknown keys and malformed values are reported with their
/// key path.
pub fn parse_spec(json: &str) -> Result<ExperimentSpec, ExperimentError> {
    let spec: ExperimentSpec = parse_strict(json)?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentSpec, ExperimentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_spec(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub config: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    /// Absent for single-run experiments.
    pub aggregate: Option<AggregateReport>,
}

fn load_source(spec: &ExperimentSpec) -> Result<Dataset, ExperimentError> {
    Ok(match &spec.dataset {
        DatasetSource::Synthetic(cfg) => generate(cfg),
        DatasetSource::File { path } => load_dataset(path)?,
    })
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Trains and tests one run; returns the report and the best checkpoint.
pub fn run_once(spec: &ExperimentSpec, data: &Dataset, run: usize) -> Result<(RunReport, Checkpoint), ExperimentError> {
    let run_seed = spec.run_seed(run);
    let (train, val, test) = stratified_split(data, seed::derive(spec.base_seed, seed::STREAM_SPLIT));
    let mask_seed = |split: &Dataset| {
        let s = split.split.map_or(0, |s| s.index());
        seed::derive(seed::derive(run_seed, seed::STREAM_MASK), s)
    };
    let train = apply_missing(&train, spec.r_m, mask_seed(&train))?;
    let val = apply_missing(&val, spec.r_m, mask_seed(&val))?;
    let test = apply_missing(&test, spec.r_m, mask_seed(&test))?;

    let mut cfg = spec.train.clone();
    cfg.seed = run_seed;
    cfg.model.ablation = spec.ablation;
    let outcome = fit(&train, &val, &cfg)?;
    let best_epoch = outcome.best_epoch;
    let scores = predict(&outcome.model, &test);
    let labels: Vec<u8> = test.records().iter().map(|r| r.label).collect();
    let masks: Vec<_> = test.records().iter().map(|r| r.mask).collect();
    let test_report = report(&scores, &labels, &masks, test.mode())?;
    let ckpt = Checkpoint::from_outcome(outcome, cfg);
    Ok((
        RunReport {
            run,
            seed: run_seed,
            best_epoch,
            test: test_report,
        },
        ckpt,
    ))
}

/// Runs every seed, writing `run-<i>/report.json`, `run-<i>/model.ckpt` and
/// `aggregate.json` under the spec's output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary, ExperimentError> {
    spec.validate()?;
    let data = load_source(spec)?;
    let out = &spec.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut runs = Vec::new();
    for i in 0..spec.seeds {
        let (rep, ckpt) = run_once(spec, &data, i)?;
        log::info!("run {i}: acc {:.4} auc {:.4}", rep.test.acc, rep.test.auc);
        let dir = out.join(format!("run-{i}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_json(&rep, &dir.join("report.json"))?;
        ckpt.save(dir.join("model.ckpt"))?;
        runs.push(rep);
    }
    let aggregate = if runs.len() >= 2 {
        Some(aggregate_runs(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?)
    } else {
        None
    };
    let summary = ExperimentSummary {
        version: VERSION.to_string(),
        config: spec.clone(),
        seeds: (0..spec.seeds).map(|i| spec.run_seed(i)).collect(),
        runs,
        aggregate,
    };
    write_json(&summary, &out.join("aggregate.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub acc: MeanStd,
    pub f1: MeanStd,
    pub auc: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: String,
    pub r_m: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table with one row per variant.
    pub fn render(&self) -> String {
        let mut s = format!("R_m = {}, {} seeds\n", self.r_m, self.seeds.len());
        s.push_str(&format!("{:<8} {:>15} {:>15} {:>15}\n", "variant", "ACC", "F1", "AUC"));
        let cell = |m: &MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:>15} {:>15} {:>15}\n",
                r.variant.name(),
                cell(&r.acc),
                cell(&r.f1),
                cell(&r.auc)
            ));
        }
        s
    }
}

/// Runs the spec once per ablation variant (each in its own subdirectory)
/// and writes `ablation.json` and `ablation.txt`.
pub fn ablate(spec: &ExperimentSpec) -> Result<AblationTable, ExperimentError> {
    spec.validate()?;
    if spec.seeds < 2 {
        return Err(ExperimentError::Metric(MetricError::TooFewRuns(spec.seeds)));
    }
    let mut summaries = BTreeMap::new();
    for variant in Ablation::ALL {
        let mut s = spec.clone();
        s.ablation = variant;
        s.output_dir = spec.output_dir.join(variant.name());
        summaries.insert(variant.name(), run_experiment(&s)?);
    }
    let rows = Ablation::ALL
        .iter()
        .map(|&variant| {
            let agg = summaries[variant.name()].aggregate.clone().expect("at least two runs");
            AblationRow {
                variant,
                acc: agg.acc,
                f1: agg.f1,
                auc: agg.auc,
            }
        })
        .collect();
    let table = AblationTable {
        version: VERSION.to_string(),
        r_m: spec.r_m,
        seeds: (0..spec.seeds).map(|i| spec.run_seed(i)).collect(),
        rows,
    };
    let out = &spec.output_dir;
    write_json(&table, &out.join("ablation.json"))?;
    let txt = out.join("ablation.txt");
    fs::write(&txt, table.render()).map_err(io_err(&txt))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn minimal_config_gets_defaults() {
        let spec = parse_spec(r#"{"dataset": {"synthetic": {"n": 50}}, "r_m": 0.3}"#).unwrap();
        assert_eq!(spec.seeds, 5);
        assert_eq!(spec.train.lr, 0.002);
        assert_eq!(spec.train.batch_size, 64);
        assert_eq!(spec.ablation, Ablation::Full);
        match spec.dataset {
            DatasetSource::Synthetic(s) => assert_eq!((s.n, s.separation), (50, 3.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": 0.3, "dropout": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
        let err = parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": 0.3, "train": {"dropout": 0.1}}"#).unwrap_err();
        match err {
            ExperimentError::Parse { path, message } => {
                assert!(path.starts_with("train"), "{path}");
                assert!(message.contains("dropout"));
            }
            other => panic!("{other:?}"),
        }
        let err = parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": "high"}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::Parse { ref path, .. } if path == "r_m"), "{err}");
    }

    #[test]
    fn off_grid_rate_rejected() {
        let err = parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": 0.45}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::RateOffGrid { rate, .. } if rate == 0.45));
        // 0.7 exists only for three modalities
        assert!(parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": 0.7}"#).is_ok());
        let two = r#"{"dataset": {"synthetic": {"mode": "two"}}, "r_m": 0.7}"#;
        assert!(matches!(parse_spec(two), Err(ExperimentError::RateOffGrid { .. })));
        let heads = r#"{"dataset": {"synthetic": {}}, "r_m": 0.3, "train": {"model": {"heads": 7}}}"#;
        assert!(matches!(parse_spec(heads), Err(ExperimentError::Parse { ref path, .. }) if path == "train.model"));
    }

    #[test]
    fn run_seeds_are_distinct() {
        let spec = parse_spec(r#"{"dataset": {"synthetic": {}}, "r_m": 0.3}"#).unwrap();
        let mut seeds: Vec<u64> = (0..5).map(|i| spec.run_seed(i)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn experiment_writes_reports_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelConfig::toy(Mode::Three);
        model.inputs = [768, 512, 768];
        let spec = ExperimentSpec {
            dataset: DatasetSource::Synthetic(SynthConfig {
                n: 60,
                ..Default::default()
            }),
            r_m: 0.3,
            seeds: 2,
            base_seed: 4,
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                model,
                ..Default::default()
            },
            ablation: Ablation::Full,
            output_dir: dir.path().to_path_buf(),
        };
        let summary = run_experiment(&spec).unwrap();
        assert_eq!(summary.runs.len(), 2);
        assert!(summary.aggregate.is_some());
        for i in 0..2 {
            let run = dir.path().join(format!("run-{i}"));
            let rep: RunReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
            assert_eq!(rep, summary.runs[i]);
            Checkpoint::load(run.join("model.ckpt")).unwrap();
        }
        let agg: ExperimentSummary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("aggregate.json")).unwrap()).unwrap();
        assert_eq!(agg, summary);
    }
}
