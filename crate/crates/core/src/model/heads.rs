//! Per-face logit and weight heads: two affine maps of the shared feature,
//! the weight passed through a ReLU so it is never negative.

use afw_tensor::{ParamId, ParamStore, Real, Tape, Var};
use rand::Rng;

use super::init;
use crate::error::Result;

pub const LOGIT_W: &str = "afw/logit.weight";
pub const LOGIT_B: &str = "afw/logit.bias";
pub const WEIGHT_W: &str = "afw/weight.weight";
pub const WEIGHT_B: &str = "afw/weight.bias";

#[derive(Clone, Debug)]
pub struct Heads {
    logit_w: ParamId,
    logit_b: ParamId,
    weight_w: ParamId,
    weight_b: ParamId,
}

impl Heads {
    pub fn init<T: Real, R: Rng>(dim: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let std = (1.0 / dim as f64).sqrt();
        store.add(LOGIT_W, init::normal(rng, &[dim, 1], std))?;
        store.add(LOGIT_B, init::zeros(&[1]))?;
        store.add(WEIGHT_W, init::normal(rng, &[dim, 1], 0.1 * std))?;
        // start every face with weight ≈ 1
        store.add(WEIGHT_B, init::filled(&[1], 1.0))?;
        Self::bind(store)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Ok(Heads {
            logit_w: store.require(LOGIT_W)?,
            logit_b: store.require(LOGIT_B)?,
            weight_w: store.require(WEIGHT_W)?,
            weight_b: store.require(WEIGHT_B)?,
        })
    }

    /// `[N,D]` features → (`[N,1]` logits, `[N,1]` non-negative weights).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<(Var, Var)> {
        let (lw, lb) = (tape.param(store, self.logit_w), tape.param(store, self.logit_b));
        let l = tape.matmul(features, lw)?;
        let l = tape.add_row(l, lb)?;
        let (ww, wb) = (tape.param(store, self.weight_w), tape.param(store, self.weight_b));
        let w = tape.matmul(features, ww)?;
        let w = tape.add_row(w, wb)?;
        let w = tape.relu(w)?;
        Ok((l, w))
    }

    /// Zeroes both heads so the replica contributes `w = 0`, `l = 0`.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in [self.logit_w, self.logit_b, self.weight_w, self.weight_b] {
            let n = store.get(id).numel();
            store.get_mut(id).assign(&vec![T::zero(); n])?;
        }
        Ok(())
    }
}
