//! End-to-end gradient check of the detector in 64-bit arithmetic.
//!
//! A tiny network scores one random video; the analytic gradient of
//! `BCE(p_rnn)` with respect to a sample of parameter entries is compared
//! with central finite differences.

use afw_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{bce_with_logit, BackboneConfig, GruConfig, ModelConfig, Network};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub faces: usize,
    pub patch_side: usize,
    /// Parameter entries probed per seed; 0 probes all of them.
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { feature_dim: 16, hidden: 16, faces: 4, patch_side: 16, probes: 300, step: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

impl GradcheckConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_side: self.patch_side,
                channels: vec![4, 6],
                feature_dim: self.feature_dim,
                ..Default::default()
            },
            gru: GruConfig { hidden: self.hidden, bidirectional_layers: 1, unidirectional_layers: 1 },
            // A detached p_w copy would make the analytic gradient differ
            // from the true derivative that finite differences measure.
            detach_pw_input: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub probed: usize,
    pub max_relative_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn loss(net: &Network, store: &ParamStore<f64>, patches: &Tensor<f64>, target: f64) -> Result<(Tape<f64>, Var)> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, patches)?;
    let l = bce_with_logit(&mut tape, out.gru_logit, target)?;
    Ok((tape, l))
}

/// Checks one random network, video and label drawn from `seed`.
pub fn check_seed(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let model = cfg.model();
    let (net, mut store) = Network::init::<f64>(&model, seed)?;
    let mut rng = rng_for(seed, "gradcheck");
    let s = cfg.patch_side;
    let data: Vec<f64> = (0..cfg.faces * 3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect();
    let patches = Tensor::new(&[cfg.faces, 3, s, s], data)?;
    let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let grads = {
        let (tape, l) = loss(&net, &store, &patches, target)?;
        tape.backward(l)?
    };
    let mut coords: Vec<(ParamId, usize)> =
        store.ids().filter(|&id| store.get(id).requires_grad()).flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i))).collect();
    if coords.is_empty() {
        return Err(CoreError::config("no trainable parameters to check"));
    }
    coords.shuffle(&mut rng);
    if cfg.probes > 0 {
        coords.truncate(cfg.probes);
    }
    let mut worst = (0.0f64, String::new());
    for &(id, i) in &coords {
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let x0 = store.get(id).data()[i];
        let mut eval = |x: f64| -> Result<f64> {
            let mut values = store.get(id).data().to_vec();
            values[i] = x;
            store.get_mut(id).assign(&values)?;
            let (tape, l) = loss(&net, &store, &patches, target)?;
            Ok(tape.item(l))
        };
        let plus = eval(x0 + cfg.step)?;
        let minus = eval(x0 - cfg.step)?;
        eval(x0)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        if err > worst.0 {
            worst = (err, store.name(id).to_string());
        }
    }
    Ok(GradcheckReport { seed, probed: coords.len(), max_relative_error: worst.0, worst: worst.1 })
}
