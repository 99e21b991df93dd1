//! Config-driven experiment runner: method comparisons and ablations across
//! seeds, per-run reports, aggregated result tables and plot exports.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    load_temporal_csv, BooleanSpec, CsvSchema, DriftSpec, MoonsSpec, Snapshot, TemporalDataset,
};
use crate::error::{Error, Result};
use crate::losses::DeltaMode;
use crate::temporal_nn::{
    Checkpoint, MlpSpec, Model, ModelSpec, PerFeatureModel, PerFeatureSpec, TemporalModel,
};
use crate::training::{evaluate, train, Method, TrainConfig, TrainReport};

/// Where the snapshots come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Moons(MoonsSpec),
    Boolean(BooleanSpec),
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Moons(_) => "moons".into(),
            DataSource::Boolean(_) => "boolean".into(),
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// Generated sources are reseeded per run; CSV data is fixed.
    pub fn load(&self, seed: u64) -> Result<TemporalDataset> {
        match self {
            DataSource::Moons(s) => DriftSpec::Moons(s.clone()).with_seed(seed).generate(),
            DataSource::Boolean(s) => DriftSpec::Boolean(s.clone()).with_seed(seed).generate(),
            DataSource::Csv { path, schema } => load_temporal_csv(path, schema),
        }
    }
}

/// One experiment: data, model, base training settings, methods and seeds.
///
/// `train` holds [`TrainConfig`] fields other than `method`;
/// `overrides.<method>` tables are merged over it for that method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Hold out the second-to-last snapshot for validation.
    #[serde(default)]
    pub validation_split: bool,
    pub data: DataSource,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Table>,
    /// `k` values for the finetune-domain ablation.
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    /// Add a `time_invariant` row to comparisons: ERM on the per-feature
    /// model with every `w_j` held constant in time.
    #[serde(default)]
    pub time_invariant: bool,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Baseline, Method::LastDomain, Method::Gi]
}
fn default_k_values() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    /// Rotated 2-Moons with the reference architecture and schedule.
    pub fn moons() -> Self {
        Self {
            name: "moons".into(),
            seeds: default_seeds(),
            methods: vec![
                Method::Baseline,
                Method::LastDomain,
                Method::GradReg,
                Method::Gi,
            ],
            validation_split: false,
            data: DataSource::Moons(MoonsSpec::default()),
            model: ModelSpec::Mlp(MlpSpec::two_moons()),
            train: toml::Table::new(),
            overrides: BTreeMap::new(),
            k_values: default_k_values(),
            time_invariant: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "data file {} does not exist",
                    path.display()
                )));
            }
        }
        for m in &self.methods {
            self.train_config(*m, 0)?;
        }
        if self.time_invariant && !matches!(self.model, ModelSpec::PerFeature(_)) {
            return Err(Error::Config(
                "the time-invariant row needs the per-feature model".into(),
            ));
        }
        Ok(())
    }

    /// Training settings for `method` at `seed`.
    pub fn train_config(&self, method: Method, seed: u64) -> Result<TrainConfig> {
        let mut table = self.train.clone();
        if let Some(o) = self.overrides.get(method.name()) {
            merge(&mut table, o);
        }
        table.insert("method".into(), toml::Value::String(method.name().into()));
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(
        &self,
        ds: &TemporalDataset,
    ) -> Result<(Vec<Snapshot>, Option<Snapshot>, Snapshot)> {
        if self.validation_split {
            let (tr, val, test) = ds.train_val_test_split()?;
            Ok((tr, Some(val), test))
        } else {
            let (tr, test) = ds.train_test_split()?;
            Ok((tr, None, test))
        }
    }
}

/// What a single (cell, seed) run produced, as persisted in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub dataset: String,
    pub seed: u64,
    pub model: ModelSpec,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Ok {
        /// Error % (classification) or MAE on the test snapshot.
        test_metric: f64,
        /// Same metric pooled over the training snapshots.
        train_metric: f64,
        test_loss: f64,
        param_count: usize,
        checkpoint: PathBuf,
        delta_trace: Option<PathBuf>,
        report: Box<TrainReport>,
    },
    Failed {
        config: Option<TrainConfig>,
        error: String,
    },
}

impl RunRecord {
    pub fn test_metric(&self) -> Option<f64> {
        match &self.outcome {
            RunOutcome::Ok { test_metric, .. } => Some(*test_metric),
            RunOutcome::Failed { .. } => None,
        }
    }

    pub fn train_metric(&self) -> Option<f64> {
        match &self.outcome {
            RunOutcome::Ok { train_metric, .. } => Some(*train_metric),
            RunOutcome::Failed { .. } => None,
        }
    }
}

/// A table row's recipe: a label plus the model and training settings.
#[derive(Clone)]
pub struct Cell {
    pub label: String,
    pub model: ModelSpec,
    /// Produces the training config for a seed, or the error to record.
    pub config: std::sync::Arc<dyn Fn(u64) -> Result<TrainConfig> + Send + Sync>,
}

impl std::fmt::Debug for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cell")
            .field("label", &self.label)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub metric_mean: Option<f64>,
    /// Sample standard deviation; `None` below two successful seeds.
    pub metric_std: Option<f64>,
    pub n_seeds: usize,
    pub failed: usize,
    pub train_metric_mean: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| r.failed == 0)
    }

    /// Groups records by label (first-seen order) and aggregates.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut order: Vec<(String, String)> = Vec::new();
        for r in records {
            let key = (r.label.clone(), r.dataset.clone());
            if !order.contains(&key) {
                order.push(key);
            }
        }
        let rows = order
            .into_iter()
            .map(|(label, dataset)| {
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.label == label && r.dataset == dataset)
                    .collect();
                let metrics: Vec<f64> = group.iter().filter_map(|r| r.test_metric()).collect();
                let train: Vec<f64> = group.iter().filter_map(|r| r.train_metric()).collect();
                let errors = group
                    .iter()
                    .filter_map(|r| match &r.outcome {
                        RunOutcome::Failed { error, .. } => {
                            Some(format!("seed {}: {error}", r.seed))
                        }
                        RunOutcome::Ok { .. } => None,
                    })
                    .collect::<Vec<_>>();
                ResultRow {
                    method: label,
                    dataset,
                    metric_mean: mean(&metrics),
                    metric_std: sample_std(&metrics),
                    n_seeds: metrics.len(),
                    failed: errors.len(),
                    train_metric_mean: mean(&train),
                    errors,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join("results.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(Error::Csv)?;
        w.write_record([
            "method",
            "dataset",
            "metric_mean",
            "metric_std",
            "n_seeds",
            "failed",
        ])?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.dataset.clone(),
                fmt(r.metric_mean),
                fmt(r.metric_std),
                r.n_seeds.to_string(),
                r.failed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("results.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json_path, e))
    }

    /// Human-readable summary, one line per row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mean = r
                .metric_mean
                .map_or_else(|| "n/a".into(), |v| format!("{v:.2}"));
            let std = r
                .metric_std
                .map_or_else(|| "n/a".into(), |v| format!("{v:.2}"));
            out += &format!(
                "{:<24} {:<10} {mean:>8} ± {std:<6} (n={}",
                r.method, r.dataset, r.n_seeds
            );
            if r.failed > 0 {
                out += &format!(", {} failed", r.failed);
            }
            out += ")\n";
        }
        out
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sample_std(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    (v.len() >= 2)
        .then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out.join(safe).join(format!("seed_{seed}"))
}

/// Mean metric over a list of training snapshots, weighted by size.
fn pooled_metric(model: &Model, snaps: &[Snapshot], cfg: &TrainConfig) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0.0;
    for s in snaps {
        acc += evaluate(model, s, cfg.loss.base)?.metric * s.len() as f64;
        n += s.len() as f64;
    }
    Ok(acc / n)
}

/// Trains and evaluates one (cell, seed) pair, persisting its artifacts
/// under `dir`.
pub fn run_one(
    exp: &ExperimentConfig,
    cell: &Cell,
    seed: u64,
    dir: &Path,
) -> Result<(RunRecord, Model)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = (cell.config)(seed)?;
    let ds = exp.data.load(seed)?;
    let (train_s, val, test) = exp.split(&ds)?;
    let (model, report) = train(&cell.model, &train_s, val.as_ref(), &cfg)?;
    let metrics = evaluate(&model, &test, cfg.loss.base)?;
    let train_metric = pooled_metric(&model, &train_s, &cfg)?;
    let checkpoint = dir.join("checkpoint.json");
    model.checkpoint().save(&checkpoint)?;
    let delta_trace = if report.delta_trace.is_empty() {
        None
    } else {
        let p = dir.join("delta_trace.csv");
        crate::losses::write_delta_trace(&report.delta_trace, &p)?;
        Some(p)
    };
    let record = RunRecord {
        label: cell.label.clone(),
        dataset: exp.data.name(),
        seed,
        model: model.spec(),
        outcome: RunOutcome::Ok {
            test_metric: metrics.metric,
            train_metric,
            test_loss: metrics.loss,
            param_count: model.params().scalar_count(),
            checkpoint,
            delta_trace,
            report: Box::new(report),
        },
    };
    Ok((record, model))
}

/// Writes `dir/report.json`.
pub fn save_record(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(record)?).map_err(|e| Error::io(&path, e))
}

/// Runs every cell for every seed (in parallel), persists one
/// `report.json` per run, then aggregates from the persisted files and
/// writes `results.csv` / `results.json` to `out`.
pub fn run_cells(exp: &ExperimentConfig, cells: &[Cell], out: &Path) -> Result<ResultsTable> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, exp.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    let jobs: Vec<(&Cell, u64)> = cells
        .iter()
        .flat_map(|c| exp.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let dirs: Vec<PathBuf> = jobs
        .par_iter()
        .map(|&(cell, seed)| {
            let dir = run_dir(out, &cell.label, seed);
            let record = match run_one(exp, cell, seed, &dir) {
                Ok((r, _)) => {
                    info!(
                        "{} seed {seed}: {:.3}",
                        cell.label,
                        r.test_metric().unwrap_or(f64::NAN)
                    );
                    r
                }
                Err(e) => {
                    warn!("{} seed {seed} failed: {e}", cell.label);
                    RunRecord {
                        label: cell.label.clone(),
                        dataset: exp.data.name(),
                        seed,
                        model: cell.model.clone(),
                        outcome: RunOutcome::Failed {
                            config: (cell.config)(seed).ok(),
                            error: e.to_string(),
                        },
                    }
                }
            };
            save_record(&record, &dir)?;
            Ok(dir)
        })
        .collect::<Result<_>>()?;
    let records = dirs
        .iter()
        .map(|d| load_record(&d.join("report.json")))
        .collect::<Result<Vec<_>>>()?;
    let table = ResultsTable::from_records(&records);
    table.write(out)?;
    Ok(table)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-aggregates every `report.json` found under `out`, rows sorted by
/// label.
pub fn aggregate_dir(out: &Path) -> Result<ResultsTable> {
    let mut records = Vec::new();
    collect_records(out, &mut records)?;
    records.sort_by(|a, b| (a.label.as_str(), a.seed).cmp(&(b.label.as_str(), b.seed)));
    Ok(ResultsTable::from_records(&records))
}

fn collect_records(dir: &Path, into: &mut Vec<RunRecord>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_records(&path, into)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            into.push(load_record(&path)?);
        }
    }
    Ok(())
}

fn method_cell(exp: &ExperimentConfig, method: Method, label: String) -> Cell {
    let exp = exp.clone();
    Cell {
        label,
        model: exp.model.clone(),
        config: std::sync::Arc::new(move |seed| exp.train_config(method, seed)),
    }
}

pub fn comparison_cells(exp: &ExperimentConfig) -> Vec<Cell> {
    let mut cells: Vec<Cell> = exp
        .methods
        .iter()
        .map(|&m| method_cell(exp, m, m.name().to_string()))
        .collect();
    if let (true, ModelSpec::PerFeature(pf)) = (exp.time_invariant, &exp.model) {
        let mut cell = method_cell(exp, Method::Erm, "time_invariant".into());
        cell.model = ModelSpec::PerFeature(PerFeatureSpec {
            time_invariant: true,
            ..pf.clone()
        });
        cells.push(cell);
    }
    cells
}

pub fn run_comparison(exp: &ExperimentConfig, out: &Path) -> Result<ResultsTable> {
    run_cells(exp, &comparison_cells(exp), out)
}

pub fn delta_mode_name(mode: DeltaMode) -> &'static str {
    match mode {
        DeltaMode::Random => "random",
        DeltaMode::Adversarial => "adversarial",
        DeltaMode::AdversarialWarmStart => "adversarial_ws",
    }
}

/// GI under each δ-selection mode, same seeds.
pub fn delta_ablation_cells(exp: &ExperimentConfig) -> Vec<Cell> {
    [
        DeltaMode::Random,
        DeltaMode::Adversarial,
        DeltaMode::AdversarialWarmStart,
    ]
    .into_iter()
    .map(|mode| {
        let exp = exp.clone();
        Cell {
            label: format!("gi/{}", delta_mode_name(mode)),
            model: exp.model.clone(),
            config: std::sync::Arc::new(move |seed| {
                let mut cfg = exp.train_config(Method::Gi, seed)?;
                cfg.loss.delta_mode = mode;
                Ok(cfg)
            }),
        }
    })
    .collect()
}

pub fn run_delta_ablation(exp: &ExperimentConfig, out: &Path) -> Result<ResultsTable> {
    run_cells(exp, &delta_ablation_cells(exp), out)
}

/// GI with each finetune-domain count in `exp.k_values`.
pub fn k_ablation_cells(exp: &ExperimentConfig) -> Vec<Cell> {
    exp.k_values
        .iter()
        .map(|&k| {
            let exp = exp.clone();
            Cell {
                label: format!("gi/k={k}"),
                model: exp.model.clone(),
                config: std::sync::Arc::new(move |seed| {
                    let mut cfg = exp.train_config(Method::Gi, seed)?;
                    cfg.k = k;
                    Ok(cfg)
                }),
            }
        })
        .collect()
}

pub fn run_k_ablation(exp: &ExperimentConfig, out: &Path) -> Result<ResultsTable> {
    run_cells(exp, &k_ablation_cells(exp), out)
}

/// Time-aware ERM with 0, 1, … TReLU layers, converted from the last hidden
/// layer backwards.
pub fn trelu_ablation_cells(exp: &ExperimentConfig) -> Result<Vec<Cell>> {
    let ModelSpec::Mlp(mlp) = &exp.model else {
        return Err(Error::Config("TReLU ablation needs the MLP model".into()));
    };
    Ok((0..=mlp.hidden.len())
        .map(|count| {
            let exp = exp.clone();
            Cell {
                label: format!("erm/trelu={count}"),
                model: ModelSpec::Mlp(mlp.with_trelu_count(count)),
                config: std::sync::Arc::new(move |seed| exp.train_config(Method::Erm, seed)),
            }
        })
        .collect())
}

pub fn run_trelu_ablation(exp: &ExperimentConfig, out: &Path) -> Result<ResultsTable> {
    run_cells(exp, &trelu_ablation_cells(exp)?, out)
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// `t,w_0,...,w_d` at each raw time in `grid` (mapped through the model's
/// time normalization).
pub fn export_weight_curves(model: &PerFeatureModel, grid: &[f64], path: &Path) -> Result<()> {
    let times: Vec<f64> = grid
        .iter()
        .map(|&t| model.time_map().normalize(t))
        .collect();
    let curves = model.weight_curves(&times)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let d = curves.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..d).map(|j| format!("w_{j}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (t, row) in grid.iter().zip(&curves) {
        let cells: Vec<String> = std::iter::once(t.to_string())
            .chain(row.iter().map(f64::to_string))
            .collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Axis-aligned box `[x0_min, x0_max] × [x1_min, x1_max]`. The default
/// holds the 2-Moons under any rotation about the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: (f64, f64),
    pub x1: (f64, f64),
}

impl Default for BoundingBox {
    fn default() -> Self {
        Self {
            x0: (-2.75, 2.75),
            x1: (-2.75, 2.75),
        }
    }
}

/// One grid cell of a decision-boundary export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub x0: f64,
    pub x1: f64,
    pub predicted: usize,
    /// Logit of class 1 minus logit of class 0.
    pub margin: f64,
}

/// Predictions on a `resolution × resolution` grid at raw time `t`.
pub fn decision_boundary(
    model: &Model,
    t: f64,
    bbox: BoundingBox,
    resolution: usize,
) -> Result<Vec<BoundaryPoint>> {
    if model.input_dim() != 2 {
        return Err(Error::Config(format!(
            "decision boundaries need 2 input features, model has {}",
            model.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::Config("resolution must be at least 1".into()));
    }
    let xs = linspace(bbox.x0.0, bbox.x0.1, resolution);
    let ys = linspace(bbox.x1.0, bbox.x1.1, resolution);
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for &b in &ys {
        for &a in &xs {
            data.extend([a, b]);
        }
    }
    let n = resolution * resolution;
    let x = crate::diffcore::Tensor::new(n, 2, data)?;
    let batch = crate::losses::Batch::at_time(
        x.clone(),
        model.time_map().normalize(t),
        crate::datasets::Labels::Class(vec![0; n]),
    )?;
    let out = crate::losses::predict(model, &batch)?;
    Ok((0..n)
        .map(|r| {
            let row = out.row_slice(r);
            let margin = if row.len() == 1 {
                row[0]
            } else {
                row[1] - row[0]
            };
            BoundaryPoint {
                x0: x.get(r, 0),
                x1: x.get(r, 1),
                predicted: crate::training::predicted_class(row),
                margin,
            }
        })
        .collect())
}

pub fn export_decision_boundary(
    model: &Model,
    t: f64,
    bbox: BoundingBox,
    resolution: usize,
    path: &Path,
) -> Result<Vec<BoundaryPoint>> {
    let grid = decision_boundary(model, t, bbox, resolution)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x0", "x1", "predicted_class", "logit_margin"])?;
    for p in &grid {
        w.write_record([
            p.x0.to_string(),
            p.x1.to_string(),
            p.predicted.to_string(),
            p.margin.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(grid)
}

/// Restores a model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.restore()
}

/// The Boolean drift setup with the per-feature model. Grad-Reg runs with
/// a large weight and no early stopping so its curves flatten.
pub fn boolean_experiment() -> ExperimentConfig {
    let table = |text: &str| -> toml::Table { text.parse().expect("literal table") };
    let mut overrides = BTreeMap::new();
    overrides.insert(
        Method::GradReg.name().to_string(),
        table("early_stop = false\n[loss]\nkind = \"grad_reg\"\nlambda = 10.0"),
    );
    ExperimentConfig {
        name: "boolean".into(),
        methods: vec![Method::Erm, Method::Gi, Method::GradReg],
        data: DataSource::Boolean(BooleanSpec::default()),
        model: ModelSpec::PerFeature(PerFeatureSpec::new(5)),
        train: table(
            "pretrain_epochs = 300\nfinetune_epochs = 100\npretrain_lr = 5e-3\nfinetune_lr = 5e-3",
        ),
        overrides,
        time_invariant: true,
        ..ExperimentConfig::moons()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut exp = ExperimentConfig::moons();
        exp.train
            .insert("pretrain_epochs".into(), toml::Value::Integer(3));
        let mut over = toml::Table::new();
        let mut loss = toml::Table::new();
        loss.insert("kind".into(), "gi".into());
        loss.insert("lambda".into(), toml::Value::Float(0.1));
        over.insert("loss".into(), toml::Value::Table(loss));
        exp.overrides.insert("gi".into(), over);
        let text = exp.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, exp);
        let cfg = back.train_config(Method::Gi, 4).unwrap();
        assert_eq!(
            (cfg.pretrain_epochs, cfg.seed, cfg.loss.lambda),
            (3, 4, 0.1)
        );
        assert_eq!(
            back.train_config(Method::Baseline, 0).unwrap().loss.lambda,
            1.0
        );
    }

    #[test]
    fn parses_a_hand_written_config() {
        let text = r#"
            name = "tiny"
            seeds = [1]
            methods = ["gi", "baseline"]
            [data]
            kind = "moons"
            domains = 4
            per_domain = 20
            [model]
            kind = "mlp"
            input_dim = 2
            hidden = [8]
            output_dim = 2
            [model.time]
            m = 4
            m_p = 1
            trelu = [true]
            [train]
            pretrain_epochs = 1
            batch_size = 8
            [train.loss]
            kind = "gi"
            delta_mode = "random"
        "#;
        let exp = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(exp.methods, vec![Method::Gi, Method::Baseline]);
        assert_eq!(exp.data.load(1).unwrap().snapshots().len(), 4);
    }

    #[test]
    fn aggregation_statistics() {
        assert_eq!(mean(&[1.0, 3.0]), Some(2.0));
        assert_eq!(sample_std(&[1.0, 3.0]), Some(2f64.sqrt()));
        assert_eq!(sample_std(&[5.0]), None);
        assert_eq!(mean(&[]), None);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.0, 3.0, 200);
        assert_eq!((g.len(), g[0], g[199]), (200, 0.0, 3.0));
        assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
