//! Training objectives: ERM, gradient interpolation with adversarial δ,
//! gradient regularization and time perturbation.

use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Labels;
use crate::diffcore::{Dual, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::temporal_nn::TemporalModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Erm,
    Gi,
    GradReg,
    TimePerturb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    CrossEntropy,
    SquaredError,
    AbsoluteError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// `δ ~ U(-Δ, Δ)`, no ascent.
    Random,
    /// Ascent from a fresh uniform draw every minibatch.
    Adversarial,
    /// Ascent starting from the previous minibatch's δ.
    AdversarialWarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: ObjectiveKind,
    #[serde(default = "default_base")]
    pub base: BaseLoss,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Half-width of the δ window, on the normalized time axis.
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
    #[serde(default = "default_ascent_rate")]
    pub ascent_rate: f64,
    #[serde(default = "default_delta_mode")]
    pub delta_mode: DeltaMode,
    #[serde(default = "default_grad_exit")]
    pub grad_exit_threshold: f64,
}

fn default_base() -> BaseLoss {
    BaseLoss::CrossEntropy
}
fn default_lambda() -> f64 {
    1.0
}
fn default_delta_max() -> f64 {
    0.5
}
fn default_ascent_steps() -> usize {
    10
}
fn default_ascent_rate() -> f64 {
    5e-2
}
fn default_delta_mode() -> DeltaMode {
    DeltaMode::AdversarialWarmStart
}
fn default_grad_exit() -> f64 {
    1e-4
}

impl LossSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            base: default_base(),
            lambda: default_lambda(),
            delta_max: default_delta_max(),
            ascent_steps: default_ascent_steps(),
            ascent_rate: default_ascent_rate(),
            delta_mode: default_delta_mode(),
            grad_exit_threshold: default_grad_exit(),
        }
    }

    pub fn erm() -> Self {
        Self::new(ObjectiveKind::Erm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        let uses_delta = matches!(self.kind, ObjectiveKind::Gi | ObjectiveKind::TimePerturb);
        if uses_delta {
            if !(self.delta_max > 0.0) || !self.delta_max.is_finite() {
                return Err(Error::Config(format!(
                    "Δ must be > 0 for {:?}, got {}",
                    self.kind, self.delta_max
                )));
            }
            if self.delta_mode != DeltaMode::Random && self.ascent_steps == 0 {
                return Err(Error::Config(
                    "adversarial δ selection needs at least 1 ascent step".into(),
                ));
            }
            if !(self.ascent_rate > 0.0) || !self.ascent_rate.is_finite() {
                return Err(Error::Config("ascent rate must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One row of the δ trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub epoch: usize,
    pub batch: usize,
    pub delta0: f64,
    pub delta: f64,
    pub inner_loss: f64,
}

/// Current δ, its per-minibatch history and the RNG for δ₀ draws.
#[derive(Debug, Clone)]
pub struct DeltaState {
    pub delta: f64,
    pub history: Vec<DeltaRecord>,
    epoch: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl DeltaState {
    pub fn new(seed: u64) -> Self {
        Self {
            delta: 0.0,
            history: Vec::new(),
            epoch: 0,
            batch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sets the epoch stamp for subsequent records and resets the batch count.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.batch = 0;
    }

    fn record(&mut self, delta0: f64, delta: f64, inner_loss: f64) {
        self.delta = delta;
        self.history.push(DeltaRecord {
            epoch: self.epoch,
            batch: self.batch,
            delta0,
            delta,
            inner_loss,
        });
        self.batch += 1;
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        write_delta_trace(&self.history, path)
    }
}

/// CSV with header `epoch,batch,delta0,delta,inner_loss`.
pub fn write_delta_trace(history: &[DeltaRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,batch,delta0,delta,inner_loss").map_err(io)?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.batch, r.delta0, r.delta, r.inner_loss
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A minibatch: features, normalized times (`n×1`) and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub t: Tensor,
    pub y: Labels,
}

impl Batch {
    pub fn new(x: Tensor, t: Tensor, y: Labels) -> Result<Self> {
        if t.cols() != 1 || t.rows() != x.rows() || y.len() != x.rows() {
            return Err(Error::shape(
                "batch",
                format!("x {:?}, t {:?}, {} labels", x.shape(), t.shape(), y.len()),
            ));
        }
        Ok(Self { x, t, y })
    }

    /// All rows share the scalar time `t`.
    pub fn at_time(x: Tensor, t: f64, y: Labels) -> Result<Self> {
        let n = x.rows();
        Self::new(x, Tensor::full(n, 1, t), y)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean base loss of `pred` against `y` as a graph node.
///
/// Cross-entropy takes logits. A single logit column is read as the
/// class-1 logit of a binary problem.
pub fn base_loss_node(g: &mut Graph, pred: Var, y: &Labels, kind: BaseLoss) -> Result<Var> {
    let [n, c] = g.shape(pred);
    if y.len() != n {
        return Err(Error::shape(
            "base_loss",
            format!("{n} predictions, {} labels", y.len()),
        ));
    }
    match kind {
        BaseLoss::CrossEntropy => {
            let Labels::Class(labels) = y else {
                return Err(Error::Usage("cross-entropy needs class labels".into()));
            };
            let logits = if c == 1 {
                let zeros = g.constant(Tensor::zeros(n, 1))?;
                g.concat_cols(zeros, pred)?
            } else {
                pred
            };
            g.softmax_cross_entropy(logits, Rc::from(labels.as_slice()))
        }
        BaseLoss::SquaredError | BaseLoss::AbsoluteError => {
            if c != 1 {
                return Err(Error::shape(
                    "base_loss",
                    format!("regression losses need one output column, got {c}"),
                ));
            }
            let target = Tensor::column((0..n).map(|i| y.value(i)).collect());
            let target = g.constant(target)?;
            let diff = g.sub(pred, target)?;
            let per = if kind == BaseLoss::SquaredError {
                g.square(diff)?
            } else {
                g.abs(diff)?
            };
            g.mean(per)
        }
    }
}

/// Numeric value of [`base_loss_node`].
pub fn base_loss(pred: &Tensor, y: &Labels, kind: BaseLoss) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone())?;
    let l = base_loss_node(&mut g, p, y, kind)?;
    Ok(g.scalar(l))
}

/// Builds `x` and the shifted time column `t + offset` on the graph.
fn inputs(g: &mut Graph, batch: &Batch, offset: Option<Var>, sign: f64) -> Result<(Var, Var)> {
    let x = g.constant(batch.x.clone())?;
    let t = g.constant(batch.t.clone())?;
    let t = match offset {
        Some(d) => {
            let d = if sign == 1.0 { d } else { g.scale(d, sign)? };
            g.add_scalar(t, d)?
        }
        None => t,
    };
    Ok((x, t))
}

/// `F(x, t−δ) + δ·∂F(x, t−δ)/∂t` with `δ` a `1×1` node.
pub fn interpolated_prediction_node<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    delta: Var,
) -> Result<Var> {
    let (x, t) = inputs(g, batch, Some(delta), -1.0)?;
    let t = g.time_input(t, true)?;
    let out = model.forward(g, x, t)?;
    match out.tangent {
        Some(dt) => {
            let step = g.mul_scalar(dt, delta)?;
            g.add(out.primal, step)
        }
        None => Ok(out.primal),
    }
}

/// Numeric first-order extrapolation from `t − δ` to `t`.
pub fn interpolated_prediction<M: TemporalModel + ?Sized>(
    model: &M,
    batch: &Batch,
    delta: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let d = g.constant(Tensor::scalar(delta))?;
    let p = interpolated_prediction_node(&mut g, model, batch, d)?;
    Ok(g.value(p).clone())
}

/// `F(x, t)` without a tangent channel.
pub fn predict_node<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
) -> Result<Var> {
    let (x, t) = inputs(g, batch, None, 1.0)?;
    Ok(model.forward(g, x, Dual::constant(t))?.primal)
}

pub fn predict<M: TemporalModel + ?Sized>(model: &M, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = predict_node(&mut g, model, batch)?;
    Ok(g.value(p).clone())
}

/// The term δ is chosen to maximize, for the δ-driven objectives.
fn inner_loss_node<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    delta: Var,
) -> Result<Var> {
    let pred = match spec.kind {
        ObjectiveKind::Gi => interpolated_prediction_node(g, model, batch, delta)?,
        ObjectiveKind::TimePerturb => {
            let (x, t) = inputs(g, batch, Some(delta), 1.0)?;
            model.forward(g, x, Dual::constant(t))?.primal
        }
        other => {
            return Err(Error::Usage(format!("{other:?} has no δ-dependent term")));
        }
    };
    base_loss_node(g, pred, &batch.y, spec.base)
}

/// Inner loss and its derivative in δ.
pub fn inner_loss_and_grad<M: TemporalModel + ?Sized>(
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    delta: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let d = g.variable(Tensor::scalar(delta))?;
    let l = inner_loss_node(&mut g, model, batch, spec, d)?;
    let value = g.scalar(l);
    let grad = match g.grad_wrt_scalar(l, d) {
        Ok(v) => v,
        // δ not reached: the model ignores time.
        Err(Error::Usage(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((value, grad))
}

fn clamp(delta: f64, max: f64) -> f64 {
    delta.clamp(-max, max)
}

/// Picks δ for this minibatch according to `spec.delta_mode`, records it in
/// `state` and returns it. Model parameters are not touched.
///
/// Ascent takes up to `ascent_steps` steps `δ ← clamp(δ + η·∂ℓ/∂δ)` and
/// stops early once `|∂ℓ/∂δ|` drops below the exit threshold. The result is
/// whichever of the start and end points has the larger inner loss.
pub fn train_delta<M: TemporalModel + ?Sized>(
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    state: &mut DeltaState,
) -> Result<f64> {
    spec.validate()?;
    let max = spec.delta_max;
    let delta0 = match spec.delta_mode {
        DeltaMode::AdversarialWarmStart if !state.history.is_empty() => clamp(state.delta, max),
        _ => state.rng.random_range(-max..=max),
    };
    if spec.delta_mode == DeltaMode::Random {
        let mut g = Graph::new();
        let d = g.constant(Tensor::scalar(delta0))?;
        let l = inner_loss_node(&mut g, model, batch, spec, d)?;
        state.record(delta0, delta0, g.scalar(l));
        return Ok(delta0);
    }

    let (start_loss, mut grad) = inner_loss_and_grad(model, batch, spec, delta0)?;
    let (mut delta, mut loss) = (delta0, start_loss);
    for _ in 0..spec.ascent_steps {
        if grad.abs() < spec.grad_exit_threshold {
            break;
        }
        delta = clamp(delta + spec.ascent_rate * grad, max);
        (loss, grad) = inner_loss_and_grad(model, batch, spec, delta)?;
    }
    if loss < start_loss {
        (delta, loss) = (delta0, start_loss);
    }
    state.record(delta0, delta, loss);
    Ok(delta)
}

/// `ℓ(y; F(x,t)) + λ·ℓ(y; F(x,t−δ) + δ·∂F(x,t−δ)/∂t)` at a fixed δ, which
/// enters as a constant.
pub fn gi_objective<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    delta: f64,
) -> Result<Var> {
    let pred = predict_node(g, model, batch)?;
    let fit = base_loss_node(g, pred, &batch.y, spec.base)?;
    let d = g.constant(Tensor::scalar(delta))?;
    let interp = interpolated_prediction_node(g, model, batch, d)?;
    let reg = base_loss_node(g, interp, &batch.y, spec.base)?;
    let reg = g.scale(reg, spec.lambda)?;
    g.add(fit, reg)
}

/// `ℓ(y; F(x,t)) + λ·ℓ(y; F(x,t+δ))` at a fixed δ.
pub fn time_perturb_objective<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    delta: f64,
) -> Result<Var> {
    let pred = predict_node(g, model, batch)?;
    let fit = base_loss_node(g, pred, &batch.y, spec.base)?;
    let d = g.constant(Tensor::scalar(delta))?;
    let (x, t) = inputs(g, batch, Some(d), 1.0)?;
    let shifted = model.forward(g, x, Dual::constant(t))?.primal;
    let reg = base_loss_node(g, shifted, &batch.y, spec.base)?;
    let reg = g.scale(reg, spec.lambda)?;
    g.add(fit, reg)
}

/// Selects δ* with [`train_delta`] and returns the GI loss node at δ*.
pub fn gi_loss<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    state: &mut DeltaState,
) -> Result<Var> {
    if spec.kind != ObjectiveKind::Gi {
        return Err(Error::Usage(format!("gi_loss called with {:?}", spec.kind)));
    }
    let delta = train_delta(model, batch, spec, state)?;
    gi_objective(g, model, batch, spec, delta)
}

/// `ℓ(y; F(x,t)) + λ·mean_i ‖∂F(x_i,t_i)/∂t‖²`.
pub fn grad_reg_loss<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<Var> {
    let (x, t) = inputs(g, batch, None, 1.0)?;
    let t = g.time_input(t, true)?;
    let out = model.forward(g, x, t)?;
    let fit = base_loss_node(g, out.primal, &batch.y, spec.base)?;
    let Some(dt) = out.tangent else {
        return Ok(fit);
    };
    let sq = g.square(dt)?;
    let total = g.sum(sq)?;
    let penalty = g.scale(total, spec.lambda / batch.len() as f64)?;
    g.add(fit, penalty)
}

/// Selects δ* by ascent on `ℓ(y; F(x,t+δ))` and returns the loss node.
pub fn time_perturb_loss<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    state: &mut DeltaState,
) -> Result<Var> {
    if spec.kind != ObjectiveKind::TimePerturb {
        return Err(Error::Usage(format!(
            "time_perturb_loss called with {:?}",
            spec.kind
        )));
    }
    let delta = train_delta(model, batch, spec, state)?;
    time_perturb_objective(g, model, batch, spec, delta)
}

/// Dispatches on `spec.kind`.
pub fn objective<M: TemporalModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    batch: &Batch,
    spec: &LossSpec,
    state: &mut DeltaState,
) -> Result<Var> {
    match spec.kind {
        ObjectiveKind::Erm => {
            let pred = predict_node(g, model, batch)?;
            base_loss_node(g, pred, &batch.y, spec.base)
        }
        ObjectiveKind::Gi => gi_loss(g, model, batch, spec, state),
        ObjectiveKind::GradReg => grad_reg_loss(g, model, batch, spec),
        ObjectiveKind::TimePerturb => time_perturb_loss(g, model, batch, spec, state),
    }
}
