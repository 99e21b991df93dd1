//! Forward-mode derivative channel w.r.t. the scalar time input.
//!
//! A [`Dual`] pairs a primal node with the node holding its directional
//! derivative. Both live on the same [`Graph`], so a loss built from tangents
//! is still differentiable by the reverse sweep (reverse-over-forward).
//! `tangent == None` stands for an identically zero tangent.

use std::rc::Rc;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dual {
    pub primal: Var,
    pub tangent: Option<Var>,
}

impl Dual {
    /// Lifts a node whose derivative w.r.t. time is zero.
    pub fn constant(primal: Var) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    pub fn new(primal: Var, tangent: Var) -> Self {
        Self {
            primal,
            tangent: Some(tangent),
        }
    }
}

impl Graph {
    /// A time column seeded with unit tangent, or unseeded.
    pub fn time_input(&mut self, t: Var, seed: bool) -> Result<Dual> {
        if !seed {
            return Ok(Dual::constant(t));
        }
        let [r, c] = self.shape(t);
        let one = self.constant(Tensor::ones(r, c))?;
        Ok(Dual::new(t, one))
    }

    /// The tangent node, materializing zeros when absent.
    pub fn tangent_or_zeros(&mut self, a: Dual) -> Result<Var> {
        match a.tangent {
            Some(t) => Ok(t),
            None => {
                let [r, c] = self.shape(a.primal);
                self.constant(Tensor::zeros(r, c))
            }
        }
    }

    /// `a · w` where `w` does not depend on time.
    pub fn d_matmul(&mut self, a: Dual, w: Var) -> Result<Dual> {
        let primal = self.matmul(a.primal, w)?;
        let tangent = a.tangent.map(|t| self.matmul(t, w)).transpose()?;
        Ok(Dual { primal, tangent })
    }

    /// `a + row`, `row` constant in time.
    pub fn d_add_row(&mut self, a: Dual, row: Var) -> Result<Dual> {
        Ok(Dual {
            primal: self.add_row(a.primal, row)?,
            tangent: a.tangent,
        })
    }

    pub fn d_add(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.add(a.primal, b.primal)?;
        let tangent = match (a.tangent, b.tangent) {
            (Some(x), Some(y)) => Some(self.add(x, y)?),
            (x, None) => x,
            (None, y) => y,
        };
        Ok(Dual { primal, tangent })
    }

    pub fn d_sub(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.sub(a.primal, b.primal)?;
        let tangent = match (a.tangent, b.tangent) {
            (Some(x), Some(y)) => Some(self.sub(x, y)?),
            (x, None) => x,
            (None, Some(y)) => Some(self.scale(y, -1.0)?),
        };
        Ok(Dual { primal, tangent })
    }

    /// Elementwise product rule.
    pub fn d_mul(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.mul(a.primal, b.primal)?;
        let left = a.tangent.map(|ta| self.mul(ta, b.primal)).transpose()?;
        let right = b.tangent.map(|tb| self.mul(a.primal, tb)).transpose()?;
        let tangent = match (left, right) {
            (Some(x), Some(y)) => Some(self.add(x, y)?),
            (x, None) => x,
            (None, y) => y,
        };
        Ok(Dual { primal, tangent })
    }

    pub fn d_sin(&mut self, a: Dual) -> Result<Dual> {
        let primal = self.sin(a.primal)?;
        let tangent = match a.tangent {
            Some(t) => {
                let c = self.cos(a.primal)?;
                Some(self.mul(c, t)?)
            }
            None => None,
        };
        Ok(Dual { primal, tangent })
    }

    pub fn d_tanh(&mut self, a: Dual) -> Result<Dual> {
        let primal = self.tanh(a.primal)?;
        let tangent = match a.tangent {
            Some(t) => {
                let sq = self.square(primal)?;
                let slope = self.affine(sq, -1.0, 1.0)?;
                Some(self.mul(slope, t)?)
            }
            None => None,
        };
        Ok(Dual { primal, tangent })
    }

    /// `max(a, 0)`, taking the identity branch at exactly zero.
    pub fn d_relu(&mut self, a: Dual) -> Result<Dual> {
        let mask: Rc<[bool]> = self
            .value(a.primal)
            .data()
            .iter()
            .map(|&x| x >= 0.0)
            .collect();
        let primal = self.mask(a.primal, mask.clone())?;
        let tangent = a.tangent.map(|t| self.mask(t, mask)).transpose()?;
        Ok(Dual { primal, tangent })
    }

    pub fn d_select(&mut self, mask: Rc<[bool]>, on_true: Dual, on_false: Dual) -> Result<Dual> {
        let primal = self.select(mask.clone(), on_true.primal, on_false.primal)?;
        let tangent = match (on_true.tangent, on_false.tangent) {
            (None, None) => None,
            (Some(t), None) => Some(self.mask(t, mask)?),
            (ta, tb) => {
                let ta = match ta {
                    Some(t) => t,
                    None => self.tangent_or_zeros(on_true)?,
                };
                let tb = tb.expect("matched above");
                Some(self.select(mask, ta, tb)?)
            }
        };
        Ok(Dual { primal, tangent })
    }

    pub fn d_concat_cols(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.concat_cols(a.primal, b.primal)?;
        let tangent = if a.tangent.is_none() && b.tangent.is_none() {
            None
        } else {
            let ta = self.tangent_or_zeros(a)?;
            let tb = self.tangent_or_zeros(b)?;
            Some(self.concat_cols(ta, tb)?)
        };
        Ok(Dual { primal, tangent })
    }

    pub fn d_slice_cols(&mut self, a: Dual, start: usize, end: usize) -> Result<Dual> {
        let primal = self.slice_cols(a.primal, start, end)?;
        let tangent = a
            .tangent
            .map(|t| self.slice_cols(t, start, end))
            .transpose()?;
        Ok(Dual { primal, tangent })
    }

    pub fn d_scale(&mut self, a: Dual, c: f64) -> Result<Dual> {
        let primal = self.scale(a.primal, c)?;
        let tangent = a.tangent.map(|t| self.scale(t, c)).transpose()?;
        Ok(Dual { primal, tangent })
    }
}
