use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Labels, Snapshot, TemporalDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Boolean features whose agreement with a balanced binary label drifts.
///
/// Timestamps run `0..train_steps` for training plus one test step at
/// `train_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BooleanSpec {
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_per_step")]
    pub per_step: usize,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_features() -> usize {
    5
}
fn default_per_step() -> usize {
    100
}
fn default_train_steps() -> usize {
    3
}
fn default_test_samples() -> usize {
    1000
}

impl Default for BooleanSpec {
    fn default() -> Self {
        Self {
            features: default_features(),
            per_step: default_per_step(),
            train_steps: default_train_steps(),
            test_samples: default_test_samples(),
            seed: 0,
        }
    }
}

/// `P(x_j = y | t)` for 1-based feature `j`:
/// `p_1 = 0.6 + 0.1t`, `p_2 = 0.6`, `p_j = 0.5 + 0.49·[t = j - 3]`.
pub fn agreement_probability(j: usize, t: f64) -> Result<f64> {
    let p = match j {
        0 => return Err(Error::Config("feature indices are 1-based".into())),
        1 => 0.6 + 0.1 * t,
        2 => 0.6,
        _ => {
            if t == (j - 3) as f64 {
                0.99
            } else {
                0.5
            }
        }
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "agreement probability p_{j}({t}) = {p} is outside [0, 1]"
        )));
    }
    Ok(p)
}

fn sample_step(t: f64, n: usize, d: usize, rng: &mut impl Rng) -> Result<Snapshot> {
    let probs = (1..=d)
        .map(|j| agreement_probability(j, t))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = usize::from(rng.random_bool(0.5));
        for &p in &probs {
            let agree = rng.random::<f64>() < p;
            let x = if agree { y } else { 1 - y };
            data.push(x as f64);
        }
        labels.push(y);
    }
    Snapshot::new(t, Tensor::new(n, d, data)?, Labels::Class(labels))
}

pub fn gen_boolean_drift(spec: &BooleanSpec) -> Result<TemporalDataset> {
    if spec.features < 3 {
        return Err(Error::Config(format!(
            "boolean drift needs at least 3 features, got {}",
            spec.features
        )));
    }
    if spec.per_step == 0 || spec.test_samples == 0 || spec.train_steps == 0 {
        return Err(Error::Config(
            "sample counts and train steps must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut snapshots = Vec::with_capacity(spec.train_steps + 1);
    for t in 0..spec.train_steps {
        snapshots.push(sample_step(
            t as f64,
            spec.per_step,
            spec.features,
            &mut rng,
        )?);
    }
    snapshots.push(sample_step(
        spec.train_steps as f64,
        spec.test_samples,
        spec.features,
        &mut rng,
    )?);
    TemporalDataset::new(snapshots)
}

/// Draws `n` rows at a single time step (for Monte-Carlo checks).
pub fn sample_boolean_step(t: f64, n: usize, d: usize, seed: u64) -> Result<Snapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_step(t, n, d, &mut rng)
}
