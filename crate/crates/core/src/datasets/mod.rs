//! Temporally ordered labeled snapshots, synthetic drift generators and a
//! CSV ingestion path.

mod boolean;
mod csv_io;
mod moons;

use serde::{Deserialize, Serialize};

pub use boolean::{agreement_probability, gen_boolean_drift, sample_boolean_step, BooleanSpec};
pub use csv_io::{load_temporal_csv, write_temporal_csv, CsvSchema, DomainBinning};
pub use moons::{gen_rotated_moons, moons_skeleton, rotate_about, MoonsSpec, MOONS_CENTER};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Labels::Class(_) => TaskKind::Classification,
            Labels::Real(_) => TaskKind::Regression,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Label of row `i` as a number (class index or target).
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Labels::Class(v) => v[i] as f64,
            Labels::Real(v) => v[i],
        }
    }
}

/// Labeled data drawn at one timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub x: Tensor,
    pub y: Labels,
}

impl Snapshot {
    pub fn new(time: f64, x: Tensor, y: Labels) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Config(format!(
                "snapshot at t={time} has {} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if !time.is_finite() {
            return Err(Error::Config("snapshot timestamp must be finite".into()));
        }
        Ok(Self { time, x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Snapshot {
        Snapshot {
            time: self.time,
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
        }
    }

    /// Stacks snapshots row-wise, keeping each row's own timestamp.
    pub fn pool(snapshots: &[Snapshot]) -> Result<(Tensor, Labels, Vec<f64>)> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::Config("nothing to pool".into()))?;
        let d = first.dim();
        let mut data = Vec::new();
        let mut times = Vec::new();
        let mut labels = match &first.y {
            Labels::Class(_) => Labels::Class(Vec::new()),
            Labels::Real(_) => Labels::Real(Vec::new()),
        };
        for s in snapshots {
            data.extend_from_slice(s.x.data());
            times.extend(std::iter::repeat_n(s.time, s.len()));
            match (&mut labels, &s.y) {
                (Labels::Class(acc), Labels::Class(v)) => acc.extend_from_slice(v),
                (Labels::Real(acc), Labels::Real(v)) => acc.extend_from_slice(v),
                _ => return Err(Error::Config("mixed label kinds".into())),
            }
        }
        let x = Tensor::new(times.len(), d, data)?;
        Ok((x, labels, times))
    }
}

/// Snapshots in strictly increasing time order; the last one is the
/// held-out future domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalDataset {
    snapshots: Vec<Snapshot>,
    task: TaskKind,
    dim: usize,
}

impl TemporalDataset {
    pub fn new(snapshots: Vec<Snapshot>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::Config("dataset needs at least one snapshot".into()))?;
        let (task, dim) = (first.y.task(), first.dim());
        for pair in snapshots.windows(2) {
            if pair[1].time <= pair[0].time {
                return Err(Error::Config(format!(
                    "timestamps must increase strictly: {} then {}",
                    pair[0].time, pair[1].time
                )));
            }
        }
        for s in &snapshots {
            if s.dim() != dim || s.y.task() != task {
                return Err(Error::Config(format!(
                    "snapshot at t={} disagrees on feature dim or task kind",
                    s.time
                )));
            }
        }
        Ok(Self {
            snapshots,
            task,
            dim,
        })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn test_index(&self) -> usize {
        self.snapshots.len() - 1
    }

    /// Number of classes, for classification data.
    pub fn classes(&self) -> Option<usize> {
        let mut max = None;
        for s in &self.snapshots {
            if let Labels::Class(v) = &s.y {
                max = v.iter().copied().chain(max).max();
            }
        }
        max.map(|m| m + 1)
    }

    /// Last snapshot is test, the rest train.
    pub fn train_test_split(&self) -> Result<(Vec<Snapshot>, Snapshot)> {
        if self.snapshots.len() < 2 {
            return Err(Error::Config(format!(
                "train/test split needs at least 2 snapshots, have {}",
                self.snapshots.len()
            )));
        }
        let (train, test) = self.snapshots.split_at(self.snapshots.len() - 1);
        Ok((train.to_vec(), test[0].clone()))
    }

    /// Train on all but the last two; the second-to-last validates.
    pub fn train_val_test_split(&self) -> Result<(Vec<Snapshot>, Snapshot, Snapshot)> {
        let n = self.snapshots.len();
        if n < 3 {
            return Err(Error::Config(format!(
                "train/validation/test split needs at least 3 snapshots, have {n}"
            )));
        }
        Ok((
            self.snapshots[..n - 2].to_vec(),
            self.snapshots[n - 2].clone(),
            self.snapshots[n - 1].clone(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Moons(MoonsSpec),
    Boolean(BooleanSpec),
}

impl DriftSpec {
    pub fn generate(&self) -> Result<TemporalDataset> {
        match self {
            DriftSpec::Moons(s) => gen_rotated_moons(s),
            DriftSpec::Boolean(s) => gen_boolean_drift(s),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriftSpec::Moons(_) => "moons",
            DriftSpec::Boolean(_) => "boolean",
        }
    }

    pub fn with_seed(&self, seed: u64) -> DriftSpec {
        match self {
            DriftSpec::Moons(s) => DriftSpec::Moons(MoonsSpec { seed, ..s.clone() }),
            DriftSpec::Boolean(s) => DriftSpec::Boolean(BooleanSpec { seed, ..s.clone() }),
        }
    }
}
