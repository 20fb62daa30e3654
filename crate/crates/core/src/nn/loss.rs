use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Mixing weights of the recognition loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Emotion cross-entropy.
    pub ce: f64,
    /// AU loss after feature extraction.
    pub au_afe: f64,
    /// AU loss after the global GAT.
    pub au_gat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 0.2,
            au_afe: 0.8,
            au_gat: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ce", self.ce), ("au_afe", self.au_afe), ("au_gat", self.au_gat)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::config(format!("model.loss.{name}"), format!("{v} must be a finite non-negative weight")));
            }
        }
        Ok(())
    }

    /// `ce·w_ce + (afe·w_afe + gat·w_gat)` on plain numbers.
    pub fn combine(&self, ce: f64, afe: f64, gat: f64) -> f64 {
        self.ce * ce + (self.au_afe * afe + self.au_gat * gat)
    }
}

/// Mean binary cross-entropy over AUs (and batch) in log-sum-exp form.
pub fn au_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[T]) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::contract(format!("AU label {bad} is not 0 or 1")));
    }
    g.bce_with_logits(logits, labels)
}

/// Weighted recognition loss, same evaluation order as [`LossWeights::combine`].
pub fn mer_loss<T: Scalar>(g: &mut Graph<T>, ce: Var, au_afe: Var, au_gat: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(ce, T::cst(w.ce))?;
    let b = g.scale(au_afe, T::cst(w.au_afe))?;
    let c = g.scale(au_gat, T::cst(w.au_gat))?;
    let bc = g.add(b, c)?;
    g.add(a, bc)
}
