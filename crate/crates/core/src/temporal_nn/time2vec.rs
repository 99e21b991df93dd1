use rand::Rng;

use crate::diffcore::{Dual, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learnable time embedding: `m_p` affine components followed by
/// `m - m_p` sinusoidal ones, `τ[a] = ω_a t + b_a` or `sin(ω_a t + b_a)`.
#[derive(Debug, Clone)]
pub struct Time2Vec {
    m: usize,
    m_p: usize,
    omega: ParamId,
    phase: ParamId,
}

impl Time2Vec {
    /// Frequencies from `U(-1, 1)`, phases from `U(-π, π)`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        m_p: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if m == 0 || m_p > m {
            return Err(Error::Config(format!(
                "time2vec needs m >= 1 and m_p <= m, got m={m}, m_p={m_p}"
            )));
        }
        let pi = std::f64::consts::PI;
        let omega = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phase = (0..m).map(|_| rng.random_range(-pi..pi)).collect();
        Ok(Self {
            m,
            m_p,
            omega: store.add(format!("{prefix}.omega"), Tensor::row(omega)),
            phase: store.add(format!("{prefix}.phase"), Tensor::row(phase)),
        })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn linear_dim(&self) -> usize {
        self.m_p
    }

    pub fn omega(&self) -> ParamId {
        self.omega
    }

    pub fn phase(&self) -> ParamId {
        self.phase
    }

    /// Embeds a time column `n×1` into `n×m`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, t: Dual) -> Result<Dual> {
        let [_, c] = g.shape(t.primal);
        if c != 1 {
            return Err(Error::shape(
                "time2vec",
                format!("time must be n×1, got {c} columns"),
            ));
        }
        let omega = g.param(store, self.omega)?;
        let phase = g.param(store, self.phase)?;
        let z = g.d_matmul(t, omega)?;
        let z = g.d_add_row(z, phase)?;
        if self.m_p == self.m {
            return Ok(z);
        }
        let periodic = g.d_slice_cols(z, self.m_p, self.m)?;
        let periodic = g.d_sin(periodic)?;
        if self.m_p == 0 {
            return Ok(periodic);
        }
        let linear = g.d_slice_cols(z, 0, self.m_p)?;
        g.d_concat_cols(linear, periodic)
    }

    /// Direct evaluation at a single time.
    pub fn eval(&self, store: &ParamStore, t: f64) -> Vec<f64> {
        let omega = store.value(self.omega).data();
        let phase = store.value(self.phase).data();
        (0..self.m)
            .map(|a| {
                let z = omega[a] * t + phase[a];
                if a < self.m_p {
                    z
                } else {
                    z.sin()
                }
            })
            .collect()
    }
}
