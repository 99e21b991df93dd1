//! Time-conditioned leaky ReLU.
//!
//! For each unit `i`:
//!
//! ```text
//! out_i = x_i                              if x_i >= g_i(τ)
//!       = h_i(τ) · (x_i - g_i(τ)) + v_i(τ)  otherwise
//! ```
//!
//! where slope `h`, threshold `g` and offset `v` are single-hidden-layer
//! networks of the time embedding `τ`. Their output layers start at zero,
//! so a freshly built unit is exactly `max(x, 0)`.

use std::rc::Rc;

use rand::Rng;

use super::linear::Linear;
use crate::diffcore::{Dual, Graph, ParamStore};
use crate::error::{Error, Result};

/// `τ → tanh(τ·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct TimeSubNet {
    pub hidden: Linear,
    pub output: Linear,
}

impl TimeSubNet {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        width: usize,
        units: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::kaiming(store, &format!("{prefix}.hidden"), m, width, rng),
            output: Linear::zeros(store, &format!("{prefix}.output"), width, units),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tau: Dual) -> Result<Dual> {
        let z = self.hidden.forward(g, store, tau)?;
        let z = g.d_tanh(z)?;
        self.output.forward(g, store, z)
    }

    pub fn weight_count(&self) -> usize {
        self.hidden.weight_count() + self.output.weight_count()
    }

    pub fn bias_count(&self) -> usize {
        self.hidden.bias_count() + self.output.bias_count()
    }
}

#[derive(Debug, Clone)]
pub struct Trelu {
    units: usize,
    pub slope: TimeSubNet,
    pub threshold: TimeSubNet,
    pub offset: TimeSubNet,
}

impl Trelu {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        width: usize,
        units: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            units,
            slope: TimeSubNet::new(store, &format!("{prefix}.slope"), m, width, units, rng),
            threshold: TimeSubNet::new(store, &format!("{prefix}.threshold"), m, width, units, rng),
            offset: TimeSubNet::new(store, &format!("{prefix}.offset"), m, width, units, rng),
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Dual, tau: Dual) -> Result<Dual> {
        let [rows, cols] = g.shape(x.primal);
        if cols != self.units {
            return Err(Error::shape(
                "trelu",
                format!("input has {cols} units, layer has {}", self.units),
            ));
        }
        if g.shape(tau.primal)[0] != rows {
            return Err(Error::shape(
                "trelu",
                "time embedding rows differ from input rows",
            ));
        }
        let h = self.slope.forward(g, store, tau)?;
        let thr = self.threshold.forward(g, store, tau)?;
        let v = self.offset.forward(g, store, tau)?;
        let mask: Rc<[bool]> = g
            .value(x.primal)
            .data()
            .iter()
            .zip(g.value(thr.primal).data())
            .map(|(&xi, &gi)| xi >= gi)
            .collect();
        let shifted = g.d_sub(x, thr)?;
        let leaky = g.d_mul(h, shifted)?;
        let leaky = g.d_add(leaky, v)?;
        g.d_select(mask, x, leaky)
    }

    /// Weights of the slope and threshold networks, `2(m·w + w·d)`.
    pub fn slope_threshold_weight_count(&self) -> usize {
        self.slope.weight_count() + self.threshold.weight_count()
    }

    pub fn weight_count(&self) -> usize {
        self.slope_threshold_weight_count() + self.offset.weight_count()
    }

    pub fn bias_count(&self) -> usize {
        self.slope.bias_count() + self.threshold.bias_count() + self.offset.bias_count()
    }
}

/// Pointwise TReLU for already-evaluated `h`, `g`, `v`.
pub fn trelu_pointwise(x: &[f64], h: &[f64], g: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if h.len() != n || g.len() != n || v.len() != n {
        return Err(Error::shape("trelu", "x, h, g, v must have equal length"));
    }
    Ok((0..n)
        .map(|i| {
            if x[i] >= g[i] {
                x[i]
            } else {
                h[i] * (x[i] - g[i]) + v[i]
            }
        })
        .collect())
}
