use rand::Rng;

use crate::diffcore::{Dual, Graph, ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Affine layer `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), bias from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn kaiming(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias_bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let b = (0..fan_out)
            .map(|_| rng.random_range(-bias_bound..bias_bound))
            .collect();
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                Tensor::new(fan_in, fan_out, w).expect("sized above"),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::row(b)),
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), Tensor::zeros(fan_in, fan_out)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, fan_out)),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Dual) -> Result<Dual> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let z = g.d_matmul(x, w)?;
        g.d_add_row(z, b)
    }

    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_count(&self) -> usize {
        self.fan_out
    }
}
