use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::time2vec::Time2Vec;
use super::trelu::Trelu;
use super::{TemporalModel, TimeMap};
use crate::diffcore::{Dual, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Time embedding and the hidden layers that get a TReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeFeatures {
    pub m: usize,
    pub m_p: usize,
    /// One flag per hidden layer; unflagged layers use plain ReLU.
    pub trelu: Vec<bool>,
    #[serde(default = "default_trelu_width")]
    pub trelu_width: usize,
}

fn default_trelu_width() -> usize {
    8
}

/// Layer layout of an MLP predictor. Without `time` the model ignores `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub time: Option<TimeFeatures>,
}

impl MlpSpec {
    /// Two hidden layers of 50, TReLU after both, Time2Vec `m=8, m_p=2`.
    pub fn two_moons() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![50, 50],
            output_dim: 2,
            time: Some(TimeFeatures {
                m: 8,
                m_p: 2,
                trelu: vec![true, true],
                trelu_width: 8,
            }),
        }
    }

    /// Same layout with the time pathway removed.
    pub fn without_time(&self) -> Self {
        Self {
            time: None,
            ..self.clone()
        }
    }

    /// Converts the last `count` hidden layers to TReLU, the rest to ReLU.
    pub fn with_trelu_count(&self, count: usize) -> Self {
        let n = self.hidden.len();
        let mut spec = self.clone();
        if let Some(tf) = spec.time.as_mut() {
            tf.trelu = (0..n).map(|i| i + count.min(n) >= n).collect();
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "input and output dims must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Some(tf) = &self.time {
            if tf.trelu.len() != self.hidden.len() {
                return Err(Error::Config(format!(
                    "{} trelu flags for {} hidden layers",
                    tf.trelu.len(),
                    self.hidden.len()
                )));
            }
            if tf.m == 0 || tf.m_p > tf.m {
                return Err(Error::Config(format!(
                    "invalid time2vec dims m={}, m_p={}",
                    tf.m, tf.m_p
                )));
            }
            if tf.trelu_width == 0 {
                return Err(Error::Config("trelu width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Time-conditioned MLP `F(x, t)`: `[x ‖ τ(t)]` into linear layers with
/// ReLU or TReLU activations. All TReLUs share the one embedding `τ(t)`.
#[derive(Debug, Clone)]
pub struct TimeModel {
    spec: MlpSpec,
    params: ParamStore,
    time2vec: Option<Time2Vec>,
    layers: Vec<Linear>,
    trelus: Vec<Option<Trelu>>,
    time_map: TimeMap,
}

impl TimeModel {
    pub fn build(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let time2vec = spec
            .time
            .as_ref()
            .map(|tf| Time2Vec::new(&mut params, "time2vec", tf.m, tf.m_p, &mut rng))
            .transpose()?;
        let mut fan_in = spec.input_dim + time2vec.as_ref().map_or(0, Time2Vec::dim);
        let mut layers = Vec::new();
        let mut trelus = Vec::new();
        for (i, &width) in spec.hidden.iter().enumerate() {
            layers.push(Linear::kaiming(
                &mut params,
                &format!("hidden{i}"),
                fan_in,
                width,
                &mut rng,
            ));
            let trelu = match &spec.time {
                Some(tf) if tf.trelu[i] => Some(Trelu::new(
                    &mut params,
                    &format!("trelu{i}"),
                    tf.m,
                    tf.trelu_width,
                    width,
                    &mut rng,
                )),
                _ => None,
            };
            trelus.push(trelu);
            fan_in = width;
        }
        layers.push(Linear::kaiming(
            &mut params,
            "output",
            fan_in,
            spec.output_dim,
            &mut rng,
        ));
        Ok(Self {
            spec: spec.clone(),
            params,
            time2vec,
            layers,
            trelus,
            time_map: TimeMap::identity(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn time2vec(&self) -> Option<&Time2Vec> {
        self.time2vec.as_ref()
    }

    pub fn trelu(&self, layer: usize) -> Option<&Trelu> {
        self.trelus.get(layer).and_then(Option::as_ref)
    }

    pub fn trelu_count(&self) -> usize {
        self.trelus.iter().flatten().count()
    }
}

impl TemporalModel for TimeModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn time_map(&self) -> &TimeMap {
        &self.time_map
    }

    fn set_time_map(&mut self, map: TimeMap) {
        self.time_map = map;
    }

    fn forward(&self, g: &mut Graph, x: Var, t: Dual) -> Result<Dual> {
        let [rows, cols] = g.shape(x);
        if cols != self.spec.input_dim {
            return Err(Error::shape(
                "time_model",
                format!("expected {} features, got {cols}", self.spec.input_dim),
            ));
        }
        if g.shape(t.primal) != [rows, 1] {
            return Err(Error::shape(
                "time_model",
                format!("time must be {rows}×1, got {:?}", g.shape(t.primal)),
            ));
        }
        let store = &self.params;
        let (mut h, tau) = match &self.time2vec {
            Some(tv) => {
                let tau = tv.embed(g, store, t)?;
                (g.d_concat_cols(Dual::constant(x), tau)?, Some(tau))
            }
            None => (Dual::constant(x), None),
        };
        let (hidden, output) = self.layers.split_at(self.layers.len() - 1);
        for (layer, trelu) in hidden.iter().zip(&self.trelus) {
            let z = layer.forward(g, store, h)?;
            h = match (trelu, tau) {
                (Some(unit), Some(tau)) => unit.forward(g, store, z, tau)?,
                _ => g.d_relu(z)?,
            };
        }
        output[0].forward(g, store, h)
    }
}
