use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Labels, Snapshot, TemporalDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Centroid of the two noiseless arcs: upper arc mean `(0, 2/π)`, lower arc
/// mean `(1, 0.5 - 2/π)`.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoonsSpec {
    #[serde(default = "default_domains")]
    pub domains: usize,
    #[serde(default = "default_per_domain")]
    pub per_domain: usize,
    #[serde(default = "default_step")]
    pub step_degrees: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fixed point of the rotation; the origin by default. `MOONS_CENTER`
    /// spins the moons in place instead.
    #[serde(default = "default_center")]
    pub center: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_center() -> [f64; 2] {
    [0.0, 0.0]
}
fn default_domains() -> usize {
    10
}
fn default_per_domain() -> usize {
    200
}
fn default_step() -> f64 {
    18.0
}
fn default_noise() -> f64 {
    0.1
}

impl Default for MoonsSpec {
    fn default() -> Self {
        Self {
            domains: default_domains(),
            per_domain: default_per_domain(),
            step_degrees: default_step(),
            noise: default_noise(),
            center: default_center(),
            seed: 0,
        }
    }
}

/// Counter-clockwise rotation of `p` about `center`.
pub fn rotate_about(p: [f64; 2], center: [f64; 2], degrees: f64) -> [f64; 2] {
    let (s, c) = degrees.to_radians().sin_cos();
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// The unrotated base sample: label-1 arc `(cos θ, sin θ)`, label-0 arc
/// `(1 - cos θ, 0.5 - sin θ)`, `θ ~ U[0, π]`, plus isotropic noise.
fn base_sample(spec: &MoonsSpec, noise: f64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let upper = spec.per_domain / 2;
    let mut points = Vec::with_capacity(spec.per_domain);
    let mut labels = Vec::with_capacity(spec.per_domain);
    for i in 0..spec.per_domain {
        let theta = rng.random_range(0.0..=std::f64::consts::PI);
        let (e0, e1): (f64, f64) = (gauss.sample(&mut rng), gauss.sample(&mut rng));
        let label = usize::from(i < upper);
        let (x, y) = if label == 1 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        points.push([x + noise * e0, y + noise * e1]);
        labels.push(label);
    }
    (points, labels)
}

fn build(spec: &MoonsSpec, noise: f64) -> Result<TemporalDataset> {
    if spec.domains < 2 {
        return Err(Error::Config(format!(
            "rotated moons needs at least 2 domains, got {}",
            spec.domains
        )));
    }
    if spec.per_domain == 0 {
        return Err(Error::Config("per_domain must be at least 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config("moons noise must be non-negative".into()));
    }
    let (points, labels) = base_sample(spec, noise);
    let snapshots = (0..spec.domains)
        .map(|i| {
            let angle = spec.step_degrees * i as f64;
            let data = points
                .iter()
                .flat_map(|&p| rotate_about(p, spec.center, angle))
                .collect();
            Snapshot::new(
                i as f64,
                Tensor::new(points.len(), 2, data)?,
                Labels::Class(labels.clone()),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TemporalDataset::new(snapshots)
}

/// Domain `i` is the same base sample rotated by `step · i` degrees about
/// `spec.center`; timestamps are the domain indices.
pub fn gen_rotated_moons(spec: &MoonsSpec) -> Result<TemporalDataset> {
    build(spec, spec.noise)
}

/// Same draw of arc positions without noise.
pub fn moons_skeleton(spec: &MoonsSpec) -> Result<TemporalDataset> {
    build(spec, 0.0)
}
