//! Compact convolutional feature extractor: stride-2 3×3 conv stages with
//! ReLU, global average pooling, and a linear projection to D features.

use afw_tensor::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;

use super::init;
use super::BackboneConfig;
use crate::error::Result;

pub const MEAN: &str = "backbone/input_mean";
pub const STD: &str = "backbone/input_std";

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    mean: ParamId,
    std: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
}

fn conv_name(i: usize, what: &str) -> String {
    format!("backbone/conv{i}.{what}")
}

impl Backbone {
    pub fn init<T: Real, R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        store.add(MEAN, Tensor::full(&[3], T::of(0.5)))?;
        store.add(STD, Tensor::full(&[3], T::of(0.25)))?;
        let mut c_in = 3;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            store.add(conv_name(i, "weight"), init::normal(rng, &[c_out, c_in, 3, 3], (2.0 / fan_in).sqrt()))?;
            store.add(conv_name(i, "bias"), init::zeros(&[c_out]))?;
            c_in = c_out;
        }
        store.add("backbone/proj.weight", init::normal(rng, &[c_in, cfg.feature_dim], (1.0 / c_in as f64).sqrt()))?;
        store.add("backbone/proj.bias", init::zeros(&[cfg.feature_dim]))?;
        Self::bind(cfg, store)
    }

    pub fn bind<T: Real>(cfg: &BackboneConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expect = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.require(name)?;
            if store.get(id).shape() != shape {
                return Err(
                    TensorError::ShapeMismatch { op: "backbone.bind", lhs: store.get(id).shape().to_vec(), rhs: shape.to_vec() }.into()
                );
            }
            Ok(id)
        };
        let mean = expect(MEAN, &[3])?;
        let std = expect(STD, &[3])?;
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            convs.push((expect(&conv_name(i, "weight"), &[c_out, c_in, 3, 3])?, expect(&conv_name(i, "bias"), &[c_out])?));
            c_in = c_out;
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            mean,
            std,
            convs,
            proj_w: expect("backbone/proj.weight", &[c_in, cfg.feature_dim])?,
            proj_b: expect("backbone/proj.bias", &[cfg.feature_dim])?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Sets the per-channel standardization applied to `[0,1]` inputs.
    pub fn set_input_stats<T: Real>(&self, store: &mut ParamStore<T>, mean: [f64; 3], std: [f64; 3]) -> Result<()> {
        store.get_mut(self.mean).assign(&mean.map(T::of))?;
        store.get_mut(self.std).assign(&std.map(|s| T::of(s.max(1e-3))))?;
        Ok(())
    }

    pub fn input_stats_ids(&self) -> [ParamId; 2] {
        [self.mean, self.std]
    }

    /// `[N,3,S,S]` patches with values in `[0,1]` → `[N,D]` features.
    pub fn extract_features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<Var> {
        let side = self.cfg.input_side;
        let shape = patches.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != side || shape[3] != side {
            return Err(TensorError::ShapeMismatch {
                op: "extract_features",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), 3, side, side],
            }
            .into());
        }
        let (mean, std) = (store.get(self.mean).data(), store.get(self.std).data());
        let plane = side * side;
        let mut data = patches.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v - mean[c]) / std[c];
        }
        let mut x = tape.input(shape, data)?;
        for &(w, b) in &self.convs {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let y = tape.conv2d(x, wv, Some(bv), 2, 1)?;
            x = tape.relu(y)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let (pw, pb) = (tape.param(store, self.proj_w), tape.param(store, self.proj_b));
        let f = tape.matmul(pooled, pw)?;
        Ok(tape.add_row(f, pb)?)
    }
}
