//! A trained model bundle (main network, optional boosting replica, crop
//! geometry) with checkpoint I/O and per-track scoring.

use std::path::Path;

use afw_tensor::{Checkpoint, ParamStore, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::boosting::{boosted_forward, combine_afw_logit, combine_gru};
use crate::data::{FaceTrack, TrackConfig};
use crate::error::{CoreError, Result};
use crate::metrics::{log_loss, DEFAULT_CLIP};
use crate::model::afw::{afw_logit, logit_mean_probability, sigmoid};
use crate::model::{ModelConfig, Network};

pub const BOOST_PREFIX: &str = "boost/";

/// Config echo stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub track: TrackConfig,
    pub tag: String,
    pub updates: u64,
    pub videos_seen: u64,
}

#[derive(Debug)]
pub struct Replica<T: Real> {
    pub net: Network,
    pub store: ParamStore<T>,
}

#[derive(Debug)]
pub struct Detector<T: Real = f32> {
    pub net: Network,
    pub main: ParamStore<T>,
    pub boost: Option<Replica<T>>,
    pub track: TrackConfig,
}

// Cloning a store issues fresh parameter ids, so the bound network is
// rebuilt against the copy.
impl<T: Real> Clone for Replica<T> {
    fn clone(&self) -> Self {
        let store = self.store.clone();
        let net = Network::bind(self.net.config(), &store).expect("clone has the same layout");
        Replica { net, store }
    }
}

impl<T: Real> Clone for Detector<T> {
    fn clone(&self) -> Self {
        self.with_main(self.main.clone())
    }
}

/// Main and replica outputs merged in the logit domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostScores {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub afw_logit: f64,
    pub p_w: f64,
    /// The replica's own GRU logit.
    pub gru_logit: f64,
    pub p_rnn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n_faces: usize,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub p_logit_mean: f64,
    pub afw_logit: f64,
    pub p_w: f64,
    pub gru_logit: f64,
    pub p_rnn: f64,
    pub boost: Option<BoostScores>,
}

impl Scores {
    /// Boosted GRU probability when a replica is loaded, else `p_rnn`.
    pub fn final_probability(&self) -> f64 {
        self.boost.as_ref().map_or(self.p_rnn, |b| b.p_rnn)
    }
}

fn values<T: Real>(tape: &Tape<T>, v: afw_tensor::Var) -> Vec<f64> {
    tape.value(v).iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> Detector<T> {
    pub fn untrained(model: &ModelConfig, track: &TrackConfig, seed: u64) -> Result<Self> {
        let (net, main) = Network::init::<T>(model, seed)?;
        Ok(Detector { net, main, boost: None, track: track.clone() })
    }

    /// Copy of this detector with `main` replaced by parameters of the same layout.
    pub fn with_main(&self, main: ParamStore<T>) -> Self {
        let net = Network::bind(self.net.config(), &main).expect("replacement store has the detector layout");
        Detector { net, main, boost: self.boost.clone(), track: self.track.clone() }
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn meta(&self, tag: &str) -> CheckpointMeta {
        CheckpointMeta { model: self.config().clone(), track: self.track.clone(), tag: tag.into(), updates: 0, videos_seen: 0 }
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("meta serializes"));
        ck.append("", &self.main)?;
        if let Some(b) = &self.boost {
            ck.append(BOOST_PREFIX, &b.store)?;
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        Ok(ck.save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        if !path.exists() {
            return Err(CoreError::Checkpoint(format!("{} does not exist", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.config)
            .map_err(|e| CoreError::Checkpoint(format!("{}: unreadable config echo: {e}", path.display())))?;
        let mut main = ParamStore::new();
        for e in ck.entries.iter().filter(|e| !e.name.starts_with(BOOST_PREFIX)) {
            main.add(e.name.clone(), e.to_tensor()?)?;
        }
        let mismatch = |e: CoreError| CoreError::Checkpoint(format!("{}: parameters do not match the stored config: {e}", path.display()));
        let net = Network::bind(&meta.model, &main).map_err(mismatch)?;
        let boost = if ck.has_prefix(BOOST_PREFIX) {
            let store = ck.store_with_prefix::<T>(BOOST_PREFIX)?;
            Some(Replica { net: Network::bind(&meta.model, &store).map_err(mismatch)?, store })
        } else {
            None
        };
        Ok((Detector { net, main, boost, track: meta.track.clone() }, meta))
    }

    /// Scores a `[N,3,S,S]` batch of one video's face patches. Video-level
    /// probabilities are recomputed in `f64` from the per-face values and
    /// GRU logits, so the reduction identities hold exactly.
    pub fn score(&self, patches: &Tensor<T>) -> Result<Scores> {
        let eps = self.config().afw_eps;
        let mut tape = Tape::new();
        let (main, boost) = match &self.boost {
            None => (self.net.forward(&mut tape, &self.main, patches)?, None),
            Some(r) => {
                let b = boosted_forward(&mut tape, (&self.net, &self.main), (&r.net, &r.store), patches)?;
                (b.main, Some((b.boost_faces, b.boost_gru_logit)))
            }
        };
        let logits = values(&tape, main.faces.logits);
        let weights = values(&tape, main.faces.weights);
        let gru_logit = tape.item(main.gru_logit).as_f64();
        let boost = match boost {
            None => None,
            Some((faces, l_b)) => {
                let (lb, wb) = (values(&tape, faces.logits), values(&tape, faces.weights));
                let z = combine_afw_logit(&weights, &logits, &wb, &lb, eps)?;
                let l_b = tape.item(l_b).as_f64();
                Some(BoostScores {
                    logits: lb,
                    weights: wb,
                    afw_logit: z,
                    p_w: sigmoid(z),
                    gru_logit: l_b,
                    p_rnn: combine_gru(gru_logit, l_b),
                })
            }
        };
        let afw_logit = afw_logit(&logits, &weights, eps)?;
        Ok(Scores {
            n_faces: logits.len(),
            p_logit_mean: logit_mean_probability(&logits)?,
            p_w: sigmoid(afw_logit),
            afw_logit,
            logits,
            weights,
            gru_logit,
            p_rnn: sigmoid(gru_logit),
            boost,
        })
    }

    pub fn score_track(&self, track: &FaceTrack) -> Result<Scores> {
        self.score(&track.to_tensor()?)
    }

    /// Clipped log-loss of the final probability over non-empty tracks.
    pub fn track_set_log_loss(&self, tracks: &[FaceTrack]) -> Result<f64> {
        let mut p = Vec::with_capacity(tracks.len());
        let mut y = Vec::with_capacity(tracks.len());
        for t in tracks {
            p.push(self.score_track(t)?.final_probability());
            y.push(t.label.target());
        }
        log_loss(&p, &y, DEFAULT_CLIP)
    }
}
