use afw_tensor::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

use super::afw::afw_logit_on_tape;
use super::arcface::{arcface_loss, CLASS_WEIGHT};
use super::backbone::{Backbone, MEAN, STD};
use super::gru::GruStack;
use super::heads::Heads;
use super::{init, ModelConfig};
use crate::error::Result;
use crate::seed::rng_for;

/// Per-face quantities on the tape: `[N,D]` features, `[N,1]` logits and
/// `[N,1]` weights.
#[derive(Clone, Copy, Debug)]
pub struct FaceOutputs {
    pub features: Var,
    pub logits: Var,
    pub weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct VideoOutputs {
    pub faces: FaceOutputs,
    /// Weighted mean logit, `[1]`.
    pub afw_logit: Var,
    pub p_w: Var,
    /// Pre-sigmoid GRU output, `[1]`.
    pub gru_logit: Var,
    pub p_rnn: Var,
}

/// Parameter handles for the full model. The values live in a
/// [`ParamStore`]; the same `Network` can drive any store with matching
/// names and shapes.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    backbone: Backbone,
    heads: Heads,
    gru: GruStack,
    class_weight: ParamId,
}

impl Network {
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Network, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "model-init");
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&cfg.backbone, &mut store, &mut rng)?;
        let heads = Heads::init(cfg.backbone.feature_dim, &mut store, &mut rng)?;
        let gru = GruStack::init(&cfg.gru, cfg.gru_input_dim(), &mut store, &mut rng)?;
        let d = cfg.backbone.feature_dim;
        let class_weight = store.add(CLASS_WEIGHT, init::normal(&mut rng, &[2, d], 1.0))?;
        let net = Network { cfg: cfg.clone(), backbone, heads, gru, class_weight };
        net.set_trainable(&mut store, true);
        Ok((net, store))
    }

    pub fn bind<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Network> {
        cfg.validate()?;
        Ok(Network {
            cfg: cfg.clone(),
            backbone: Backbone::bind(&cfg.backbone, store)?,
            heads: Heads::bind(store)?,
            gru: GruStack::bind(&cfg.gru, cfg.gru_input_dim(), store)?,
            class_weight: store.require(CLASS_WEIGHT)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Marks every parameter trainable (or frozen). Input statistics are
    /// never trainable.
    pub fn set_trainable<T: Real>(&self, store: &mut ParamStore<T>, flag: bool) {
        store.set_requires_grad(flag);
        for id in self.backbone.input_stats_ids() {
            store.get_mut(id).set_requires_grad(false);
        }
    }

    /// Trainable parameter ids under any of the given name prefixes
    /// (`"backbone/"`, `"afw/"`, `"gru/"`, `"arcface/"`).
    pub fn group<T: Real>(store: &ParamStore<T>, prefixes: &[&str]) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let name = store.name(id);
                name != MEAN && name != STD && prefixes.iter().any(|p| name.starts_with(p))
            })
            .collect()
    }

    /// Zeroes the logit, weight and GRU output heads: the state a boosting
    /// replica starts from.
    pub fn zero_output_heads<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.heads.zero(store)?;
        self.gru.zero_head(store)
    }

    pub fn faces<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<FaceOutputs> {
        let features = self.backbone.extract_features(tape, store, patches)?;
        let (logits, weights) = self.heads.forward(tape, store, features)?;
        Ok(FaceOutputs { features, logits, weights })
    }

    /// GRU logit for a face sequence, with `p_w` (`[1]`) broadcast to every
    /// step. `p_w` is detached first when the config asks for it.
    pub fn gru_logit<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, faces: &FaceOutputs, p_w: Var) -> Result<Var> {
        let n = tape.shape(faces.features)[0];
        let p = if self.cfg.detach_pw_input { tape.detach(p_w) } else { p_w };
        let p = tape.reshape(p, &[1, 1])?;
        let ones = tape.constant(&Tensor::full(&[n, 1], T::one()));
        let column = tape.matmul(ones, p)?;
        let xs = tape.concat(&[faces.features, faces.logits, faces.weights, column], 1)?;
        self.gru.forward(tape, store, xs)
    }

    /// Full forward pass over one video's `[N,3,S,S]` face patches.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<VideoOutputs> {
        let faces = self.faces(tape, store, patches)?;
        let afw_logit = afw_logit_on_tape(tape, faces.logits, faces.weights, self.cfg.afw_eps)?;
        let p_w = tape.sigmoid(afw_logit)?;
        let gru_logit = self.gru_logit(tape, store, &faces, p_w)?;
        let p_rnn = tape.sigmoid(gru_logit)?;
        Ok(VideoOutputs { faces, afw_logit, p_w, gru_logit, p_rnn })
    }

    /// Angular-margin loss of the backbone features of `patches`.
    /// Labels: 0 real, 1 fake.
    pub fn arcface_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &Tensor<T>, labels: &[usize]) -> Result<Var> {
        if patches.shape()[0] != labels.len() {
            return Err(TensorError::Contract(format!("{} patches but {} labels", patches.shape()[0], labels.len())).into());
        }
        let f = self.backbone.extract_features(tape, store, patches)?;
        let w = tape.param(store, self.class_weight);
        let b = &self.cfg.backbone;
        arcface_loss(tape, f, labels, w, b.arcface_scale, b.arcface_margin)
    }
}

/// Binary cross-entropy of a `[1]` logit against a 0/1 target, computed
/// from the logit for stability: `softplus(z) − y·z`.
pub fn bce_with_logit<T: Real>(tape: &mut Tape<T>, logit: Var, target: f64) -> Result<Var> {
    let sp = tape.softplus(logit)?;
    if target == 0.0 {
        return Ok(sp);
    }
    let yz = tape.scale(logit, T::of(target))?;
    Ok(tape.sub(sp, yz)?)
}
