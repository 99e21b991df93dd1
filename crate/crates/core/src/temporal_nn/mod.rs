//! Time-sensitive model components and the predictors built from them.

mod linear;
mod mlp;
mod per_feature;
mod time2vec;
mod trelu;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use linear::Linear;
pub use mlp::{MlpSpec, TimeFeatures, TimeModel};
pub use per_feature::{PerFeatureModel, PerFeatureSpec};
pub use time2vec::Time2Vec;
pub use trelu::{trelu_pointwise, TimeSubNet, Trelu};

use crate::diffcore::{Dual, Graph, NamedTensor, ParamStore, Var};
use crate::error::{Error, Result};

/// A predictor `F(x, t)` whose parameters live in one [`ParamStore`].
///
/// `t` is an `n×1` column of normalized times; the returned [`Dual`] carries
/// `∂F/∂t` when `t` was seeded.
pub trait TemporalModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn time_map(&self) -> &TimeMap;
    fn set_time_map(&mut self, map: TimeMap);
    fn forward(&self, g: &mut Graph, x: Var, t: Dual) -> Result<Dual>;
}

/// Affine map from raw timestamps to the model's time axis,
/// `(t - origin) / span`. Fitted so the training range becomes `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub origin: f64,
    pub span: f64,
}

impl TimeMap {
    pub fn identity() -> Self {
        Self {
            origin: 0.0,
            span: 1.0,
        }
    }

    pub fn fit(times: impl IntoIterator<Item = f64>) -> Self {
        let (lo, hi) = times
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            });
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Self {
                origin: if lo.is_finite() { lo } else { 0.0 },
                span: 1.0,
            };
        }
        Self {
            origin: lo,
            span: hi - lo,
        }
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.origin) / self.span
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        u * self.span + self.origin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    PerFeature(PerFeatureSpec),
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Ok(match self {
            ModelSpec::Mlp(s) => Model::Mlp(TimeModel::build(s, seed)?),
            ModelSpec::PerFeature(s) => Model::PerFeature(PerFeatureModel::build(s, seed)?),
        })
    }

    /// The time-oblivious counterpart used by the ERM baselines.
    pub fn time_oblivious(&self) -> ModelSpec {
        match self {
            ModelSpec::Mlp(s) => ModelSpec::Mlp(s.without_time()),
            ModelSpec::PerFeature(s) => ModelSpec::PerFeature(PerFeatureSpec {
                time_invariant: true,
                ..s.clone()
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(TimeModel),
    PerFeature(PerFeatureModel),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Mlp(m) => ModelSpec::Mlp(m.spec().clone()),
            Model::PerFeature(m) => ModelSpec::PerFeature(m.spec().clone()),
        }
    }

    fn inner(&self) -> &dyn TemporalModel {
        match self {
            Model::Mlp(m) => m,
            Model::PerFeature(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn TemporalModel {
        match self {
            Model::Mlp(m) => m,
            Model::PerFeature(m) => m,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec(),
            time_map: *self.time_map(),
            params: self.params().named().to_vec(),
        }
    }
}

impl TemporalModel for Model {
    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }

    fn time_map(&self) -> &TimeMap {
        self.inner().time_map()
    }

    fn set_time_map(&mut self, map: TimeMap) {
        self.inner_mut().set_time_map(map)
    }

    fn forward(&self, g: &mut Graph, x: Var, t: Dual) -> Result<Dual> {
        self.inner().forward(g, x, t)
    }
}

/// Serialized model: layout, time normalization and every named tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub time_map: TimeMap,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn restore(&self) -> Result<Model> {
        let mut model = self.spec.build(0)?;
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, layout expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (have, want) in store.named().iter().zip(&self.params) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{}` {:?} does not match layout tensor `{}` {:?}",
                    want.name,
                    want.value.shape(),
                    have.name,
                    have.value.shape()
                )));
            }
        }
        model
            .params_mut()
            .copy_values_from(&ParamStore::from_named(self.params.clone()));
        model.set_time_map(self.time_map);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
