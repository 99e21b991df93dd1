//! Training procedures: ERM pretraining, finetuning on the last `k`
//! snapshots with a chosen objective and next-domain early stopping, the
//! time-oblivious baselines, and evaluation.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Labels, Snapshot};
use crate::diffcore::{Graph, Optimizer, OptimizerKind, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    base_loss, objective, predict, BaseLoss, Batch, DeltaRecord, DeltaState, LossSpec,
    ObjectiveKind,
};
use crate::temporal_nn::{Checkpoint, Model, ModelSpec, TemporalModel, TimeMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// ERM on all training snapshots pooled, time-oblivious model.
    Baseline,
    /// ERM on the last training snapshot, time-oblivious model.
    LastDomain,
    /// ERM on the first snapshot, then sequential finetuning on the rest.
    IncFinetune,
    /// ERM with the time-conditioned model (pretraining only).
    Erm,
    GradReg,
    TimePerturb,
    Gi,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::LastDomain,
        Method::IncFinetune,
        Method::Erm,
        Method::GradReg,
        Method::TimePerturb,
        Method::Gi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LastDomain => "last_domain",
            Method::IncFinetune => "inc_finetune",
            Method::Erm => "erm",
            Method::GradReg => "grad_reg",
            Method::TimePerturb => "time_perturb",
            Method::Gi => "gi",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Whether the method sees time at all.
    pub fn time_aware(self) -> bool {
        !matches!(
            self,
            Method::Baseline | Method::LastDomain | Method::IncFinetune
        )
    }

    /// Objective used in the finetuning phase, if there is one.
    pub fn finetune_objective(self) -> Option<ObjectiveKind> {
        match self {
            Method::GradReg => Some(ObjectiveKind::GradReg),
            Method::TimePerturb => Some(ObjectiveKind::TimePerturb),
            Method::Gi => Some(ObjectiveKind::Gi),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Parameters of the finetuning objective; `kind` is overridden by the
    /// method.
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default = "default_true")]
    pub early_stop: bool,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretrain_epochs() -> usize {
    30
}
fn default_finetune_epochs() -> usize {
    25
}
fn default_pretrain_lr() -> f64 {
    5e-3
}
fn default_finetune_lr() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_k() -> usize {
    2
}
fn default_loss() -> LossSpec {
    LossSpec::new(ObjectiveKind::Gi)
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            pretrain_epochs: default_pretrain_epochs(),
            finetune_epochs: default_finetune_epochs(),
            pretrain_lr: default_pretrain_lr(),
            finetune_lr: default_finetune_lr(),
            batch_size: default_batch_size(),
            k: default_k(),
            loss: default_loss(),
            early_stop: true,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, lr) in [
            ("pretrain", self.pretrain_lr),
            ("finetune", self.finetune_lr),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "{name} learning rate must be > 0, got {lr}"
                )));
            }
        }
        self.finetune_spec().map_or(Ok(()), |s| s.validate())
    }

    /// Loss spec for the finetuning phase with the method's objective.
    pub fn finetune_spec(&self) -> Option<LossSpec> {
        self.method.finetune_objective().map(|kind| LossSpec {
            kind,
            ..self.loss.clone()
        })
    }

    fn erm_spec(&self) -> LossSpec {
        LossSpec {
            kind: ObjectiveKind::Erm,
            ..self.loss.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Mean minibatch objective of one epoch over one snapshot (or the pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Timestamp of the snapshot trained on; `None` for a pooled epoch.
    pub time: Option<f64>,
    pub train_loss: f64,
    /// Next-domain base loss after this epoch, when early stopping.
    pub val_loss: Option<f64>,
}

/// Which finetuning epoch was kept for each finetuned snapshot.
/// `val_losses[0]` is the loss before finetuning on it, for reference;
/// the kept epoch is the argmin over epochs `1..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub time: f64,
    pub val_time: f64,
    pub chosen_epoch: usize,
    pub val_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub early_stops: Vec<StopRecord>,
    pub delta_trace: Vec<DeltaRecord>,
}

impl TrainReport {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            config: cfg.clone(),
            epochs: Vec::new(),
            early_stops: Vec::new(),
            delta_trace: Vec::new(),
        }
    }
}

/// Shared mutable state of one training run.
struct Run<'a> {
    cfg: &'a TrainConfig,
    order_rng: ChaCha8Rng,
    delta: DeltaState,
    report: TrainReport,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig) -> Self {
        Self {
            cfg,
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a),
            delta: DeltaState::new(cfg.seed ^ 0xde17a),
            report: TrainReport::new(cfg),
        }
    }

    /// One epoch over `x/t/y` in shuffled minibatches; returns the mean
    /// objective.
    fn epoch(
        &mut self,
        model: &mut Model,
        data: &Pool,
        spec: &LossSpec,
        opt: &mut Optimizer,
        where_: &str,
    ) -> Result<f64> {
        let mut idx: Vec<usize> = (0..data.x.rows()).collect();
        idx.shuffle(&mut self.order_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(self.cfg.batch_size) {
            let batch = Batch::new(
                data.x.select_rows(chunk),
                data.t.select_rows(chunk),
                data.y.select(chunk),
            )?;
            let loss = step(model, &batch, spec, &mut self.delta, opt).map_err(|e| match e {
                Error::NonFinite { node, op } => Error::Diverged(format!(
                    "{where_}, batch {batches}: non-finite value at node {node} ({op})"
                )),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{where_}, batch {batches}: loss {loss}"
                )));
            }
            total += loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }
}

/// Rows with per-row normalized times.
struct Pool {
    x: Tensor,
    t: Tensor,
    y: Labels,
}

impl Pool {
    fn of(snapshots: &[Snapshot], map: &TimeMap) -> Result<Pool> {
        let (x, y, times) = Snapshot::pool(snapshots)?;
        let t = Tensor::column(times.iter().map(|&t| map.normalize(t)).collect());
        Ok(Pool { x, t, y })
    }
}

fn step(
    model: &mut Model,
    batch: &Batch,
    spec: &LossSpec,
    state: &mut DeltaState,
    opt: &mut Optimizer,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = objective(&mut g, &*model, batch, spec, state)?;
    let grads = g.backward(loss)?;
    let store = model.params_mut();
    store.zero_grad();
    store.accumulate(&g, &grads);
    opt.step(store);
    Ok(g.scalar(loss))
}

/// Base loss of `model` on a snapshot.
pub fn snapshot_loss(model: &Model, snapshot: &Snapshot, base: BaseLoss) -> Result<f64> {
    let batch = snapshot_batch(model, snapshot)?;
    base_loss(&predict(model, &batch)?, &batch.y, base)
}

fn snapshot_batch(model: &Model, snapshot: &Snapshot) -> Result<Batch> {
    let t = model.time_map().normalize(snapshot.time);
    Batch::at_time(snapshot.x.clone(), t, snapshot.y.clone())
}

fn sweep_epochs(
    run: &mut Run<'_>,
    model: &mut Model,
    snapshots: &[Snapshot],
    epochs: usize,
    lr: f64,
    phase: Phase,
) -> Result<()> {
    let spec = run.cfg.erm_spec();
    let mut opt = Optimizer::new(run.cfg.optimizer, lr);
    let pools = snapshots
        .iter()
        .map(|s| Pool::of(std::slice::from_ref(s), model.time_map()))
        .collect::<Result<Vec<_>>>()?;
    for epoch in 1..=epochs {
        for (s, pool) in snapshots.iter().zip(&pools) {
            let where_ = format!("{phase:?} epoch {epoch} at t={}", s.time);
            let loss = run.epoch(model, pool, &spec, &mut opt, &where_)?;
            run.report.epochs.push(EpochRecord {
                phase,
                epoch,
                time: Some(s.time),
                train_loss: loss,
                val_loss: None,
            });
        }
    }
    Ok(())
}

/// ERM epochs, each sweeping the snapshots in temporal order.
pub fn pretrain(
    model: &mut Model,
    snapshots: &[Snapshot],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut run = Run::new(cfg);
    sweep_epochs(
        &mut run,
        model,
        snapshots,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        Phase::Pretrain,
    )?;
    Ok(run.report)
}

/// Finetunes on each of the last `k` training snapshots in order using
/// `spec`. With early stopping, the parameters after the epoch with the
/// lowest base loss on the next snapshot are kept. The next snapshot of the
/// last training snapshot is `validation` if given, else the snapshot itself.
pub fn finetune(
    model: &mut Model,
    snapshots: &[Snapshot],
    validation: Option<&Snapshot>,
    cfg: &TrainConfig,
    spec: &LossSpec,
) -> Result<TrainReport> {
    cfg.validate()?;
    spec.validate()?;
    let mut run = Run::new(cfg);
    finetune_in(&mut run, model, snapshots, validation, spec)?;
    run.report.delta_trace = std::mem::take(&mut run.delta.history);
    Ok(run.report)
}

fn finetune_in(
    run: &mut Run<'_>,
    model: &mut Model,
    snapshots: &[Snapshot],
    validation: Option<&Snapshot>,
    spec: &LossSpec,
) -> Result<()> {
    let cfg = run.cfg;
    if cfg.k > snapshots.len() {
        return Err(Error::Config(format!(
            "k = {} exceeds the {} training snapshots",
            cfg.k,
            snapshots.len()
        )));
    }
    let start = snapshots.len() - cfg.k;
    let mut epoch_counter = 0;
    for s in start..snapshots.len() {
        let current = &snapshots[s];
        let next = snapshots.get(s + 1).or(validation).unwrap_or(current);
        let pool = Pool::of(std::slice::from_ref(current), model.time_map())?;
        let mut opt = Optimizer::new(cfg.optimizer, cfg.finetune_lr);
        // The pre-finetune loss is logged but only trained epochs compete.
        let mut val_losses = vec![snapshot_loss(model, next, spec.base)?];
        let mut best = (f64::INFINITY, 0, model.params().clone());
        for epoch in 1..=cfg.finetune_epochs {
            epoch_counter += 1;
            run.delta.begin_epoch(epoch_counter);
            let where_ = format!("finetune epoch {epoch} at t={}", current.time);
            let loss = run.epoch(model, &pool, spec, &mut opt, &where_)?;
            let val = if cfg.early_stop {
                let v = snapshot_loss(model, next, spec.base)?;
                val_losses.push(v);
                if v < best.0 {
                    best = (v, epoch, model.params().clone());
                }
                Some(v)
            } else {
                None
            };
            run.report.epochs.push(EpochRecord {
                phase: Phase::Finetune,
                epoch,
                time: Some(current.time),
                train_loss: loss,
                val_loss: val,
            });
        }
        if cfg.early_stop {
            debug!(
                "t={}: keeping epoch {} (next-domain loss {:.4})",
                current.time, best.1, best.0
            );
            if best.1 > 0 {
                model.params_mut().copy_values_from(&best.2);
            }
            run.report.early_stops.push(StopRecord {
                time: current.time,
                val_time: next.time,
                chosen_epoch: best.1,
                val_losses,
            });
        }
    }
    Ok(())
}

/// Builds the model for `cfg.method` and trains it on `train`. Times are
/// normalized so the training range maps to `[0, 1]`.
pub fn train(
    spec: &ModelSpec,
    train: &[Snapshot],
    validation: Option<&Snapshot>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training snapshots".into()));
    }
    let spec = if cfg.method.time_aware() {
        spec.clone()
    } else {
        spec.time_oblivious()
    };
    let mut model = spec.build(cfg.seed)?;
    model.set_time_map(TimeMap::fit(train.iter().map(|s| s.time)));
    let mut run = Run::new(cfg);
    info!(
        "training {} on {} snapshots (seed {})",
        cfg.method,
        train.len(),
        cfg.seed
    );
    match cfg.method {
        Method::Baseline => {
            let pool = Pool::of(train, model.time_map())?;
            let erm = cfg.erm_spec();
            let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
            for epoch in 1..=cfg.pretrain_epochs {
                let loss = run.epoch(
                    &mut model,
                    &pool,
                    &erm,
                    &mut opt,
                    &format!("pooled epoch {epoch}"),
                )?;
                run.report.epochs.push(EpochRecord {
                    phase: Phase::Pretrain,
                    epoch,
                    time: None,
                    train_loss: loss,
                    val_loss: None,
                });
            }
        }
        Method::LastDomain => {
            let last = &train[train.len() - 1..];
            sweep_epochs(
                &mut run,
                &mut model,
                last,
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                Phase::Pretrain,
            )?;
        }
        Method::IncFinetune => {
            sweep_epochs(
                &mut run,
                &mut model,
                &train[..1],
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                Phase::Pretrain,
            )?;
            for s in 1..train.len() {
                sweep_epochs(
                    &mut run,
                    &mut model,
                    &train[s..=s],
                    cfg.finetune_epochs,
                    cfg.finetune_lr,
                    Phase::Finetune,
                )?;
            }
        }
        Method::Erm => {
            sweep_epochs(
                &mut run,
                &mut model,
                train,
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                Phase::Pretrain,
            )?;
        }
        Method::GradReg | Method::TimePerturb | Method::Gi => {
            sweep_epochs(
                &mut run,
                &mut model,
                train,
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                Phase::Pretrain,
            )?;
            let ft = cfg
                .finetune_spec()
                .expect("method has a finetune objective");
            finetune_in(&mut run, &mut model, train, validation, &ft)?;
        }
    }
    run.report.delta_trace = std::mem::take(&mut run.delta.history);
    Ok((model, run.report))
}

/// Test-set metrics plus per-example predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Misclassification error in percent, or MAE for regression.
    pub metric: f64,
    pub loss: f64,
    /// Predicted class index or regression output per row.
    pub predictions: Vec<f64>,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        100.0 - self.metric
    }
}

/// Class predicted by one row of logits; a single column is the class-1
/// logit of a binary problem.
pub fn predicted_class(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] > 0.0);
    }
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Error % for classification, MAE for regression.
pub fn score(out: &Tensor, y: &Labels) -> Result<(f64, Vec<f64>)> {
    if out.rows() != y.len() || out.rows() == 0 {
        return Err(Error::shape(
            "score",
            format!("{} predictions for {} labels", out.rows(), y.len()),
        ));
    }
    let n = out.rows() as f64;
    match y {
        Labels::Class(labels) => {
            let preds: Vec<usize> = (0..out.rows())
                .map(|r| predicted_class(out.row_slice(r)))
                .collect();
            let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
            Ok((
                100.0 * wrong as f64 / n,
                preds.into_iter().map(|p| p as f64).collect(),
            ))
        }
        Labels::Real(targets) => {
            if out.cols() != 1 {
                return Err(Error::shape(
                    "score",
                    "regression output must have one column",
                ));
            }
            let mae = out
                .data()
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / n;
            Ok((mae, out.data().to_vec()))
        }
    }
}

pub fn evaluate(model: &Model, snapshot: &Snapshot, base: BaseLoss) -> Result<Metrics> {
    let batch = snapshot_batch(model, snapshot)?;
    let out = predict(model, &batch)?;
    let loss = base_loss(&out, &batch.y, base)?;
    let (metric, predictions) = score(&out, &batch.y)?;
    Ok(Metrics {
        metric,
        loss,
        predictions,
    })
}

/// Outcome of training the per-feature model with every `w_j` held
/// constant in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeInvariantReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Largest spread of any `w_j` across the training and test times.
    pub max_weight_spread: f64,
    pub checkpoint: Checkpoint,
}

/// Trains the per-feature model with its time inputs zeroed (ERM on all
/// training snapshots) and reports accuracies.
pub fn time_invariant_diagnostic(
    spec: &ModelSpec,
    train_snapshots: &[Snapshot],
    test: &Snapshot,
    cfg: &TrainConfig,
) -> Result<TimeInvariantReport> {
    let ModelSpec::PerFeature(pf) = spec else {
        return Err(Error::Config(
            "time-invariant diagnostic needs the per-feature model".into(),
        ));
    };
    let fixed = ModelSpec::PerFeature(crate::temporal_nn::PerFeatureSpec {
        time_invariant: true,
        ..pf.clone()
    });
    let cfg = TrainConfig {
        method: Method::Erm,
        ..cfg.clone()
    };
    let (model, _) = train(&fixed, train_snapshots, None, &cfg)?;
    let base = cfg.loss.base;
    let train_accuracy = {
        let mut correct = 0.0;
        let mut total = 0.0;
        for s in train_snapshots {
            let m = evaluate(&model, s, base)?;
            correct += m.accuracy() * s.len() as f64;
            total += s.len() as f64;
        }
        correct / total
    };
    let test_accuracy = evaluate(&model, test, base)?.accuracy();
    let Model::PerFeature(pfm) = &model else {
        unreachable!("built from a per-feature spec")
    };
    let times: Vec<f64> = train_snapshots
        .iter()
        .chain(std::iter::once(test))
        .map(|s| model.time_map().normalize(s.time))
        .collect();
    let curves = pfm.weight_curves(&times)?;
    let mut spread: f64 = 0.0;
    for j in 0..curves[0].len() {
        let (lo, hi) = curves
            .iter()
            .map(|row| row[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        spread = spread.max(hi - lo);
    }
    Ok(TimeInvariantReport {
        train_accuracy,
        test_accuracy,
        max_weight_spread: spread,
        checkpoint: model.checkpoint(),
    })
}
