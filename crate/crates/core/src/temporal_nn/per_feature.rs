use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::{TemporalModel, TimeMap};
use crate::diffcore::{Dual, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerFeatureSpec {
    pub features: usize,
    #[serde(default = "default_widths")]
    pub hidden: Vec<usize>,
    /// Feed `t = 0` to every weight network, making each `w_j` a constant.
    #[serde(default)]
    pub time_invariant: bool,
}

fn default_widths() -> Vec<usize> {
    vec![50, 20]
}

impl PerFeatureSpec {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            hidden: default_widths(),
            time_invariant: false,
        }
    }
}

#[derive(Debug, Clone)]
struct WeightNet {
    layers: Vec<Linear>,
}

impl WeightNet {
    fn forward(&self, g: &mut Graph, store: &ParamStore, t: Dual) -> Result<Dual> {
        let mut h = t;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.d_relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Binary logit `Σ_j w_j(t)·x_j + w_0(t)` where every `w_j` is its own
/// small ReLU network of time. Index 0 is the bias network.
#[derive(Debug, Clone)]
pub struct PerFeatureModel {
    spec: PerFeatureSpec,
    params: ParamStore,
    nets: Vec<WeightNet>,
    time_map: TimeMap,
}

impl PerFeatureModel {
    pub fn build(spec: &PerFeatureSpec, seed: u64) -> Result<Self> {
        if spec.features == 0 {
            return Err(Error::Config(
                "per-feature model needs at least one feature".into(),
            ));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let nets = (0..=spec.features)
            .map(|j| {
                let mut fan_in = 1;
                let mut layers = Vec::new();
                for (i, &w) in spec.hidden.iter().chain(std::iter::once(&1)).enumerate() {
                    layers.push(Linear::kaiming(
                        &mut params,
                        &format!("w{j}.layer{i}"),
                        fan_in,
                        w,
                        &mut rng,
                    ));
                    fan_in = w;
                }
                WeightNet { layers }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            nets,
            time_map: TimeMap::identity(),
        })
    }

    pub fn spec(&self) -> &PerFeatureSpec {
        &self.spec
    }

    /// Weight-network outputs `n×(d+1)`, bias network first.
    pub fn weights(&self, g: &mut Graph, t: Dual) -> Result<Dual> {
        let t = if self.spec.time_invariant {
            let zeros = g.constant(Tensor::zeros(g.shape(t.primal)[0], 1))?;
            Dual::constant(zeros)
        } else {
            t
        };
        let mut out: Option<Dual> = None;
        for net in &self.nets {
            let w = net.forward(g, &self.params, t)?;
            out = Some(match out {
                Some(acc) => g.d_concat_cols(acc, w)?,
                None => w,
            });
        }
        Ok(out.expect("at least one weight network"))
    }

    /// `w_0..w_d` at each normalized time in `times`.
    pub fn weight_curves(&self, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(times.to_vec()))?;
        let w = self.weights(&mut g, Dual::constant(t))?;
        let v = g.value(w.primal);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }

    /// Weight and bias ids of the output layer of weight network `j`.
    pub fn output_layer(&self, j: usize) -> (ParamId, ParamId) {
        let l = self.nets[j].layers.last().expect("non-empty");
        (l.weight, l.bias)
    }
}

impl TemporalModel for PerFeatureModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.spec.features
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn time_map(&self) -> &TimeMap {
        &self.time_map
    }

    fn set_time_map(&mut self, map: TimeMap) {
        self.time_map = map;
    }

    fn forward(&self, g: &mut Graph, x: Var, t: Dual) -> Result<Dual> {
        let [rows, cols] = g.shape(x);
        if cols != self.spec.features {
            return Err(Error::shape(
                "per_feature_model",
                format!("expected {} features, got {cols}", self.spec.features),
            ));
        }
        if g.shape(t.primal) != [rows, 1] {
            return Err(Error::shape(
                "per_feature_model",
                "time must be an n×1 column",
            ));
        }
        let w = self.weights(g, t)?;
        let ones = g.constant(Tensor::ones(rows, 1))?;
        let x_aug = g.concat_cols(ones, x)?;
        let prod = g.d_mul(w, Dual::constant(x_aug))?;
        let sum = g.constant(Tensor::ones(self.spec.features + 1, 1))?;
        g.d_matmul(prod, sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_weights_give_expected_logit() {
        let mut model = PerFeatureModel::build(&PerFeatureSpec::new(5), 0).unwrap();
        for j in 0..=5 {
            let (w, b) = model.output_layer(j);
            model.params_mut().value_mut(w).fill(0.0);
            model
                .params_mut()
                .value_mut(b)
                .fill(if j == 0 { 0.0 } else { 1.0 });
        }
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::row(vec![1.0, 0.0, 1.0, 0.0, 0.0]))
            .unwrap();
        let t = g.constant(Tensor::scalar(0.3)).unwrap();
        let out = model.forward(&mut g, x, Dual::constant(t)).unwrap();
        assert_eq!(g.scalar(out.primal), 2.0);
    }

    #[test]
    fn weight_curves_have_one_row_per_time() {
        let model = PerFeatureModel::build(&PerFeatureSpec::new(3), 1).unwrap();
        let curves = model.weight_curves(&[0.0, 0.5, 1.0, 1.5]).unwrap();
        assert_eq!(curves.len(), 4);
        assert!(curves.iter().all(|r| r.len() == 4));
    }

    #[test]
    fn time_invariant_weights_are_constant() {
        let spec = PerFeatureSpec {
            time_invariant: true,
            ..PerFeatureSpec::new(5)
        };
        let model = PerFeatureModel::build(&spec, 2).unwrap();
        let curves = model.weight_curves(&[0.0, 0.7, 1.5, -3.0]).unwrap();
        for row in &curves[1..] {
            for (a, b) in row.iter().zip(&curves[0]) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn logit_time_derivative_matches_fd() {
        let model = PerFeatureModel::build(&PerFeatureSpec::new(5), 7).unwrap();
        let xv = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let eval = |t: f64, seed: bool| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(xv.clone())).unwrap();
            let tv = g.constant(Tensor::scalar(t)).unwrap();
            let tv = g.time_input(tv, seed).unwrap();
            let out = model.forward(&mut g, x, tv).unwrap();
            (g.scalar(out.primal), out.tangent.map(|v| g.scalar(v)))
        };
        let mut checked = 0;
        for t in [0.13, 0.41, 0.77, 1.2] {
            let h = 1e-5;
            let (up, _) = eval(t + h, false);
            let (down, _) = eval(t - h, false);
            let fd = (up - down) / (2.0 * h);
            let (_, an) = eval(t, true);
            let an = an.unwrap();
            // piecewise linear in t: skip points where a kink falls inside the stencil
            let (up2, _) = eval(t + 2.0 * h, false);
            let curvature = (up2 - 2.0 * up + eval(t, false).0).abs();
            if curvature > 1e-9 {
                continue;
            }
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel < 1e-4, "t={t}: fd {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 2);
    }
}
