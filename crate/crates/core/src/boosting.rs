//! Boosting replica: a copy of the network whose faces and GRU output are
//! merged with the frozen main network in the logit domain,
//!
//! ```text
//! p_w^b   = σ( Σ(w_j l_j + w_j^b l_j^b) / (Σ(w_j + w_j^b) + eps) )
//! p_rnn^b = σ( l_rnn + l_rnn^b )
//! ```
//!
//! and trained on the validation split with the main network frozen.

use afw_tensor::{Adam, Gradients, ParamStore, Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::data::{BalancedSampler, FaceTrack};
use crate::detector::{Detector, Replica};
use crate::error::{CoreError, Result};
use crate::model::afw::{check_faces, sigmoid};
use crate::model::{bce_with_logit, FaceOutputs, Network, VideoOutputs};
use crate::seed::derive_seed;
use crate::trainer::{param_hash, LogRecord};

/// Combined face-weighted logit.
pub fn combine_afw_logit(w: &[f64], l: &[f64], w_b: &[f64], l_b: &[f64], eps: f64) -> Result<f64> {
    check_faces(l, w)?;
    check_faces(l_b, w_b)?;
    if l.len() != l_b.len() {
        return Err(CoreError::data(format!("{} main faces but {} boost faces", l.len(), l_b.len())));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..l.len() {
        num += w[j] * l[j] + w_b[j] * l_b[j];
        den += w[j] + w_b[j];
    }
    Ok(num / (den + eps))
}

pub fn combine_afw(w: &[f64], l: &[f64], w_b: &[f64], l_b: &[f64], eps: f64) -> Result<f64> {
    combine_afw_logit(w, l, w_b, l_b, eps).map(sigmoid)
}

pub fn combine_gru(l_rnn: f64, l_rnn_b: f64) -> f64 {
    sigmoid(l_rnn + l_rnn_b)
}

#[derive(Clone, Copy, Debug)]
pub struct BoostedOutputs {
    pub main: VideoOutputs,
    pub boost_faces: FaceOutputs,
    /// Combined face-weighted logit and its probability.
    pub afw_logit: Var,
    pub p_w: Var,
    /// The replica's own GRU logit `l_rnn^b`.
    pub boost_gru_logit: Var,
    /// `l_rnn + l_rnn^b` and its probability.
    pub gru_logit: Var,
    pub p_rnn: Var,
}

/// Forward pass of main and replica over the same patches. The replica's
/// GRU receives the combined `p_w^b` in its probability slot.
pub fn boosted_forward<T: Real>(
    tape: &mut Tape<T>,
    main: (&Network, &ParamStore<T>),
    boost: (&Network, &ParamStore<T>),
    patches: &Tensor<T>,
) -> Result<BoostedOutputs> {
    let out = main.0.forward(tape, main.1, patches)?;
    let bf = boost.0.faces(tape, boost.1, patches)?;
    let eps = main.0.config().afw_eps;
    let lw = tape.mul(out.faces.logits, out.faces.weights)?;
    let lwb = tape.mul(bf.logits, bf.weights)?;
    let (a, b) = (tape.sum(lw)?, tape.sum(lwb)?);
    let num = tape.add(a, b)?;
    let (c, d) = (tape.sum(out.faces.weights)?, tape.sum(bf.weights)?);
    let den = tape.add(c, d)?;
    let den = tape.add_scalar(den, T::of(eps))?;
    let afw_logit = tape.div(num, den)?;
    let p_w = tape.sigmoid(afw_logit)?;
    let boost_gru_logit = boost.0.gru_logit(tape, boost.1, &bf, p_w)?;
    let gru_logit = tape.add(out.gru_logit, boost_gru_logit)?;
    let p_rnn = tape.sigmoid(gru_logit)?;
    Ok(BoostedOutputs { main: out, boost_faces: bf, afw_logit, p_w, boost_gru_logit, gru_logit, p_rnn })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostObjective {
    /// Cross-entropy of the combined predictions.
    CombinedBce,
    /// Squared error between the combined logits and `±residual_target`,
    /// i.e. the replica regresses the main network's logit error.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub objective: BoostObjective,
    pub lr: f64,
    pub videos_per_update: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub residual_target: f64,
    /// Train the combined face-weighted output as well as the GRU one.
    pub afw_loss: bool,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            objective: BoostObjective::CombinedBce,
            lr: 1e-4,
            videos_per_update: 8,
            max_steps: 40,
            seed: 0,
            residual_target: 3.0,
            afw_loss: true,
        }
    }
}

/// Replica initialized from the main parameters with the logit, weight
/// and GRU output heads zeroed.
pub fn init_replica<T: Real>(detector: &Detector<T>) -> Result<Replica<T>> {
    let mut store = detector.main.clone();
    let net = Network::bind(detector.config(), &store)?;
    net.zero_output_heads(&mut store)?;
    net.set_trainable(&mut store, true);
    Ok(Replica { net, store })
}

fn objective<T: Real>(tape: &mut Tape<T>, logit: Var, y: f64, cfg: &BoostConfig) -> Result<Var> {
    match cfg.objective {
        BoostObjective::CombinedBce => bce_with_logit(tape, logit, y),
        BoostObjective::Residual => {
            let t = if y > 0.5 { cfg.residual_target } else { -cfg.residual_target };
            let d = tape.add_scalar(logit, T::of(-t))?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum(sq)?)
        }
    }
}

/// Trains a fresh replica on `tracks` and attaches it to `detector`. The
/// main parameters are frozen throughout and verified unchanged.
pub fn train_boosting<T: Real>(detector: &mut Detector<T>, tracks: &[FaceTrack], cfg: &BoostConfig) -> Result<Vec<LogRecord>> {
    if !(cfg.lr > 0.0) || cfg.videos_per_update == 0 {
        return Err(CoreError::config("boost lr and videos_per_update must be positive"));
    }
    let labels: Vec<_> = tracks.iter().map(|t| t.label).collect();
    let mut sampler = BalancedSampler::new(&labels, derive_seed(cfg.seed, "boost"))?;
    let before = param_hash(&detector.main, &[""]);
    let flags: Vec<bool> = detector.main.ids().map(|id| detector.main.get(id).requires_grad()).collect();
    detector.main.set_requires_grad(false);
    let mut replica = init_replica(detector)?;
    let group = Network::group(&replica.store, &["backbone/", "afw/", "gru/"]);
    let mut adam = Adam::new(afw_tensor::AdamConfig::with_lr(cfg.lr), &replica.store, group);
    let mut log = Vec::new();
    let mut acc = Gradients::for_store(&replica.store);
    for step in 1..=cfg.max_steps {
        let mut total = 0.0;
        for _ in 0..cfg.videos_per_update {
            let track = &tracks[sampler.next_index()];
            let y = track.label.target();
            let patches = track.to_tensor::<T>()?;
            let mut tape = Tape::new();
            let out = boosted_forward(&mut tape, (&detector.net, &detector.main), (&replica.net, &replica.store), &patches)?;
            let mut loss = objective(&mut tape, out.gru_logit, y, cfg)?;
            if cfg.afw_loss {
                let a = objective(&mut tape, out.afw_logit, y, cfg)?;
                loss = tape.add(loss, a)?;
            }
            let v = tape.item(loss).as_f64();
            if !v.is_finite() {
                return Err(CoreError::TrainingFault {
                    step,
                    video: track.video_id.clone(),
                    source: Box::new(TensorError::NumericFault { op: "boost loss" }.into()),
                });
            }
            total += v;
            acc.add(&tape.backward(loss)?)?;
        }
        adam.step(&mut replica.store, &acc)?;
        acc.clear();
        log.push(LogRecord { step, loss: "boost".into(), value: total / cfg.videos_per_update as f64, timestamp: None });
    }
    let ids: Vec<_> = detector.main.ids().collect();
    for (id, flag) in ids.into_iter().zip(flags) {
        detector.main.get_mut(id).set_requires_grad(flag);
    }
    if param_hash(&detector.main, &[""]) != before {
        return Err(CoreError::data("main network changed during boost training"));
    }
    detector.boost = Some(replica);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_afw_examples() {
        let eps = 1e-8;
        let (w, l) = ([0.4, 2.0], [1.3, -0.2]);
        let p = combine_afw(&w, &l, &[0.0, 0.0], &[0.0, 0.0], eps).unwrap();
        assert_eq!(p, crate::model::afw::afw_probability(&l, &w, eps).unwrap());
        assert_eq!(combine_afw(&[1.0], &[1.0], &[1.0], &[-1.0], eps).unwrap(), 0.5);
        let p = combine_afw(&[2.0, 1.0], &[1.0, -2.0], &[1.0, 1.0], &[0.5, 0.5], eps).unwrap();
        assert!((p - 0.549_834).abs() < 1e-6, "{p}");
    }

    #[test]
    fn combine_afw_is_symmetric_in_roles() {
        let (w, l, wb, lb) = ([0.1, 3.0, 0.7], [2.0, -1.0, 0.3], [1.2, 0.0, 0.4], [-0.6, 4.0, 1.0]);
        let a = combine_afw(&w, &l, &wb, &lb, 1e-8).unwrap();
        let b = combine_afw(&wb, &lb, &w, &l, 1e-8).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn combine_afw_rejects_mismatch() {
        assert!(combine_afw(&[1.0], &[1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-8).is_err());
        assert!(combine_afw(&[1.0], &[1.0], &[-1.0], &[0.0], 1e-8).is_err());
    }

    #[test]
    fn combine_gru_examples() {
        assert_eq!(combine_gru(0.8, 0.0), sigmoid(0.8));
        assert_eq!(combine_gru(2.0, -2.0), 0.5);
        assert!((combine_gru(0.7, 0.3) - 0.731_058_6).abs() < 1e-6);
    }
}
