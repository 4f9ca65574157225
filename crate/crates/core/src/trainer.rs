//! Training loop: per-video BCE on `p_w` and `p_rnn` accumulated over
//! `videos_per_update` videos, and an angular-margin loss on random face
//! crops accumulated over `frames_per_arcface_update` frames. The two
//! accumulators feed two Adam instances with different parameter groups.

use std::path::{Path, PathBuf};

use afw_tensor::{Adam, AdamConfig, Gradients, ParamStore, Real, Tape, TensorError};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BalancedSampler, FaceProvider, FaceTrack, Manifest, Split, TrackConfig};
use crate::detector::{CheckpointMeta, Detector};
use crate::error::{CoreError, Result};
use crate::model::{bce_with_logit, ModelConfig, Network};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub bce_pw: bool,
    pub bce_rnn: bool,
    pub arcface: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { bce_pw: true, bce_rnn: true, arcface: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub videos_per_update: usize,
    pub frames_per_arcface_update: usize,
    /// Random face crops drawn from each processed video for the
    /// angular-margin accumulator.
    pub arcface_frames_per_video: usize,
    pub warmup_arcface_batches: usize,
    pub warmup_batch_size: usize,
    /// Number of BCE updates.
    pub max_steps: u64,
    pub seed: u64,
    pub losses: LossToggles,
    pub checkpoint_every_videos: u64,
    /// Validation cadence in BCE updates; 0 validates only at the end.
    pub validate_every: u64,
    /// Omit wall-clock timestamps from the metrics log.
    pub deterministic: bool,
    /// Probability of mirroring a training video before its forward pass.
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            videos_per_update: 64,
            frames_per_arcface_update: 256,
            arcface_frames_per_video: 8,
            warmup_arcface_batches: 50,
            warmup_batch_size: 32,
            max_steps: 100,
            seed: 0,
            losses: LossToggles::default(),
            checkpoint_every_videos: 500,
            validate_every: 10,
            deterministic: true,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoreError::config("lr must be positive"));
        }
        if self.videos_per_update == 0 || self.frames_per_arcface_update == 0 || self.warmup_batch_size == 0 {
            return Err(CoreError::config("accumulation counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(CoreError::config("flip probability must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(CoreError::config("Adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: String,
    pub value: f64,
    pub timestamp: Option<f64>,
}

/// Non-empty face tracks of one split, held in memory.
#[derive(Clone, Debug)]
pub struct TrackSet {
    pub tracks: Vec<FaceTrack>,
}

impl TrackSet {
    pub fn load(manifest: &Manifest, split: Split, provider: &dyn FaceProvider, cfg: &TrackConfig) -> Result<Self> {
        let mut tracks = Vec::new();
        for r in manifest.split(split) {
            let t = crate::data::build_track(manifest, r, provider, cfg)?;
            if t.is_empty() {
                warn!("video `{}` has no detected faces; left out of {split}", r.video_id);
                continue;
            }
            tracks.push(t);
        }
        if tracks.is_empty() {
            return Err(CoreError::data(format!("split `{split}` has no usable videos")));
        }
        Ok(TrackSet { tracks })
    }

    pub fn labels(&self) -> Vec<crate::data::Label> {
        self.tracks.iter().map(|t| t.label).collect()
    }
}

/// Per-channel mean and std of all patch pixels in `[0,1]` units.
pub fn input_stats(tracks: &[FaceTrack]) -> ([f64; 3], [f64; 3]) {
    let (mut sum, mut sq, mut n) = ([0.0f64; 3], [0.0f64; 3], 0.0f64);
    for f in tracks.iter().flat_map(|t| &t.faces) {
        let plane = f.patch.side() * f.patch.side();
        for (c, chunk) in f.patch.data().chunks(plane).enumerate() {
            for &v in chunk {
                let x = v as f64 / 255.0;
                sum[c] += x;
                sq[c] += x * x;
            }
        }
        n += plane as f64;
    }
    if n == 0.0 {
        return ([0.5; 3], [0.25; 3]);
    }
    let mean = sum.map(|s| s / n);
    let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(1e-6).sqrt());
    (mean, std)
}

/// SHA-256 over the names and values of every parameter whose name starts
/// with one of `prefixes`.
pub fn param_hash<T: Real>(store: &ParamStore<T>, prefixes: &[&str]) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            h.update(name.as_bytes());
            let mut raw = Vec::new();
            for &v in t.data() {
                v.write_le(&mut raw);
            }
            h.update(&raw);
        }
    }
    hex::encode(h.finalize())
}

fn timestamp(cfg: &TrainConfig) -> Option<f64> {
    if cfg.deterministic {
        return None;
    }
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).ok().map(|d| d.as_secs_f64())
}

fn arcface_batch<T: Real>(net: &Network, store: &ParamStore<T>, picks: &[(&FaceTrack, usize)]) -> Result<(f64, Gradients<T>)> {
    let patches = crate::data::patches_to_tensor(picks.iter().map(|(t, i)| &t.faces[*i].patch))?;
    let labels: Vec<usize> = picks.iter().map(|(t, _)| t.label.class_index()).collect();
    let mut tape = Tape::new();
    let mean = net.arcface_loss(&mut tape, store, &patches, &labels)?;
    let total = tape.scale(mean, T::of(picks.len() as f64))?;
    let g = tape.backward(total)?;
    Ok((tape.item(total).as_f64(), g))
}

/// Angular-margin pre-training of the backbone on random crops from
/// random training videos. Returns the mean loss of each batch.
pub fn warmup_arcface<T: Real>(net: &Network, store: &mut ParamStore<T>, tracks: &[FaceTrack], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.warmup_arcface_batches == 0 {
        return Ok(Vec::new());
    }
    if tracks.is_empty() {
        return Err(CoreError::data("warmup needs at least one training video"));
    }
    let labels: Vec<_> = tracks.iter().map(|t| t.label).collect();
    let mut sampler = BalancedSampler::new(&labels, derive_seed(cfg.seed, "warmup"))?;
    let mut rng = rng_for(cfg.seed, "warmup-crops");
    let mut adam = Adam::new(cfg.adam(), store, Network::group(store, &["backbone/", "arcface/"]));
    let mut losses = Vec::with_capacity(cfg.warmup_arcface_batches);
    for _ in 0..cfg.warmup_arcface_batches {
        let picks: Vec<(&FaceTrack, usize)> = (0..cfg.warmup_batch_size)
            .map(|_| {
                let t = &tracks[sampler.next_index()];
                (t, rng.random_range(0..t.len()))
            })
            .collect();
        let (loss, g) = arcface_batch(net, store, &picks)?;
        adam.step(store, &g)?;
        losses.push(loss / picks.len() as f64);
    }
    Ok(losses)
}

/// Counters handed to the training observer after every BCE update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub update: u64,
    pub videos_seen: u64,
}

fn fault(step: u64, video: &str, e: CoreError) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NumericFault { .. }) => {
            CoreError::TrainingFault { step, video: video.to_string(), source: Box::new(e) }
        }
        other => other,
    }
}

/// Core loop over `tracks[i]` for `i` drawn from `order`. The observer
/// runs after each BCE update.
pub fn train_loop<T: Real>(
    net: &Network,
    store: &mut ParamStore<T>,
    tracks: &[FaceTrack],
    order: &mut dyn Iterator<Item = usize>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(Progress, &ParamStore<T>) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let toggles = cfg.losses;
    let mut bce_adam = Adam::new(cfg.adam(), store, Network::group(store, &["backbone/", "afw/", "gru/"]));
    let mut arc_adam = Adam::new(cfg.adam(), store, Network::group(store, &["backbone/", "arcface/"]));
    let mut bce_acc = Gradients::for_store(store);
    let mut arc_acc = Gradients::for_store(store);
    let mut arc_frames = 0usize;
    let mut arc_sum = 0.0;
    let mut rng = rng_for(cfg.seed, "arcface-frames");
    let mut flip_rng = rng_for(cfg.seed, "train-flip");
    let mut log = Vec::new();
    let mut videos_seen = 0u64;
    for step in 1..=cfg.max_steps {
        let (mut sum_pw, mut sum_rnn) = (0.0, 0.0);
        for _ in 0..cfg.videos_per_update {
            let idx = order.next().ok_or_else(|| CoreError::data("training stream ended"))?;
            let track = tracks.get(idx).ok_or_else(|| CoreError::data(format!("no training video {idx}")))?;
            let mirrored;
            let track = if cfg.flip_probability > 0.0 && flip_rng.random_bool(cfg.flip_probability) {
                mirrored = track.flipped();
                &mirrored
            } else {
                track
            };
            let y = track.label.target();
            let run = || -> Result<(f64, f64, Option<Gradients<T>>)> {
                if !(toggles.bce_pw || toggles.bce_rnn) {
                    return Ok((0.0, 0.0, None));
                }
                let patches = track.to_tensor::<T>()?;
                let mut tape = Tape::new();
                let out = net.forward(&mut tape, store, &patches)?;
                let mut terms = Vec::new();
                let (mut lpw, mut lrnn) = (0.0, 0.0);
                if toggles.bce_pw {
                    let l = bce_with_logit(&mut tape, out.afw_logit, y)?;
                    lpw = tape.item(l).as_f64();
                    terms.push(l);
                }
                if toggles.bce_rnn {
                    let l = bce_with_logit(&mut tape, out.gru_logit, y)?;
                    lrnn = tape.item(l).as_f64();
                    terms.push(l);
                }
                let total = if terms.len() == 2 { tape.add(terms[0], terms[1])? } else { terms[0] };
                Ok((lpw, lrnn, Some(tape.backward(total)?)))
            };
            let (lpw, lrnn, g) = run().map_err(|e| fault(step, &track.video_id, e))?;
            if !(lpw.is_finite() && lrnn.is_finite()) {
                return Err(fault(step, &track.video_id, TensorError::NumericFault { op: "bce" }.into()));
            }
            if let Some(g) = g {
                bce_acc.add(&g)?;
            }
            sum_pw += lpw;
            sum_rnn += lrnn;
            if toggles.arcface && cfg.arcface_frames_per_video > 0 {
                let mut rows: Vec<usize> = (0..track.len()).collect();
                rows.shuffle(&mut rng);
                rows.truncate(cfg.arcface_frames_per_video);
                let picks: Vec<(&FaceTrack, usize)> = rows.into_iter().map(|i| (track, i)).collect();
                let (l, g) = arcface_batch(net, store, &picks).map_err(|e| fault(step, &track.video_id, e))?;
                arc_acc.add(&g)?;
                arc_frames += picks.len();
                arc_sum += l;
                if arc_frames >= cfg.frames_per_arcface_update {
                    arc_adam.step(store, &arc_acc)?;
                    log.push(LogRecord { step, loss: "arcface".into(), value: arc_sum / arc_frames as f64, timestamp: timestamp(cfg) });
                    arc_acc.clear();
                    arc_frames = 0;
                    arc_sum = 0.0;
                }
            }
            videos_seen += 1;
        }
        if toggles.bce_pw || toggles.bce_rnn {
            bce_adam.step(store, &bce_acc)?;
            bce_acc.clear();
        }
        let n = cfg.videos_per_update as f64;
        for (name, on, v) in [("bce_pw", toggles.bce_pw, sum_pw), ("bce_rnn", toggles.bce_rnn, sum_rnn)] {
            if on {
                log.push(LogRecord { step, loss: name.into(), value: v / n, timestamp: timestamp(cfg) });
            }
        }
        observer(Progress { update: step, videos_seen }, store)?;
    }
    Ok(log)
}

/// Everything `train` needs.
#[derive(Clone)]
pub struct TrainJob<'a> {
    pub manifest: &'a Manifest,
    pub provider: &'a dyn FaceProvider,
    pub model: ModelConfig,
    pub track: TrackConfig,
    pub train: TrainConfig,
    /// Checkpoints and the metrics log go here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub detector: Detector<f32>,
    /// Parameters with the lowest validation log-loss of `p_rnn`, when a
    /// validation split exists.
    pub best: Option<(u64, f64, ParamStore<f32>)>,
    pub log: Vec<LogRecord>,
    pub warmup_losses: Vec<f64>,
    pub videos_seen: u64,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.afw";
pub const BEST_CHECKPOINT: &str = "best.afw";

fn save(detector: &Detector<f32>, store: &ParamStore<f32>, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let d = detector.with_main(store.clone());
    d.save(path, meta)
}

/// Full training run: input statistics, optional warmup, the main loop,
/// periodic and best-on-validation checkpoints.
pub fn train(job: &TrainJob) -> Result<TrainOutcome> {
    job.train.validate()?;
    job.track.validate()?;
    if job.model.backbone.input_side != job.track.patch_side {
        return Err(CoreError::config(format!(
            "model input side {} differs from patch side {}",
            job.model.backbone.input_side, job.track.patch_side
        )));
    }
    let train_set = TrackSet::load(job.manifest, Split::Train, job.provider, &job.track)?;
    let val_set = match job.manifest.class_counts(Split::Val) {
        (0, 0) => None,
        _ => Some(TrackSet::load(job.manifest, Split::Val, job.provider, &job.track)?),
    };
    let mut sampler = BalancedSampler::new(&train_set.labels(), job.train.seed)?;
    let mut detector = Detector::<f32>::untrained(&job.model, &job.track, job.train.seed)?;
    let (mean, std) = input_stats(&train_set.tracks);
    detector.net.backbone().set_input_stats(&mut detector.main, mean, std)?;
    let net = detector.net.clone();
    let warmup_losses = warmup_arcface(&net, &mut detector.main, &train_set.tracks, &job.train)?;
    if let Some(out) = &job.out_dir {
        std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    }
    let meta = |p: Progress, tag: &str| CheckpointMeta {
        model: job.model.clone(),
        track: job.track.clone(),
        tag: tag.to_string(),
        updates: p.update,
        videos_seen: p.videos_seen,
    };
    let mut best: Option<(u64, f64, ParamStore<f32>)> = None;
    let mut last_ckpt = 0u64;
    let mut videos_seen = 0u64;
    let template = detector.clone();
    let mut observer = |p: Progress, store: &ParamStore<f32>| -> Result<()> {
        videos_seen = p.videos_seen;
        if let Some(out) = &job.out_dir {
            let every = job.train.checkpoint_every_videos;
            if every > 0 && p.videos_seen / every > last_ckpt / every {
                let name = format!("videos-{:06}.afw", p.videos_seen);
                save(&template, store, meta(p, "periodic"), &out.join(name))?;
            }
            last_ckpt = p.videos_seen;
        }
        let due = p.update == job.train.max_steps || (job.train.validate_every > 0 && p.update.is_multiple_of(job.train.validate_every));
        if let (true, Some(val)) = (due, &val_set) {
            let d = template.with_main(store.clone());
            let loss = d.track_set_log_loss(&val.tracks)?;
            info!("update {}: validation log-loss {loss:.4}", p.update);
            if best.as_ref().is_none_or(|b| loss < b.1) {
                best = Some((p.update, loss, store.clone()));
                if let Some(out) = &job.out_dir {
                    save(&template, store, meta(p, "best"), &out.join(BEST_CHECKPOINT))?;
                }
            }
        }
        Ok(())
    };
    let result = train_loop(&net, &mut detector.main, &train_set.tracks, &mut sampler, &job.train, &mut observer);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            if let (Some(out), CoreError::TrainingFault { step, video, .. }) = (&job.out_dir, &e) {
                let snapshot = out.join("fault.afw");
                warn!("numeric fault at update {step} on `{video}`; parameters saved to {}", snapshot.display());
                let p = Progress { update: *step, videos_seen };
                detector.save(&snapshot, meta(p, "fault"))?;
            }
            return Err(e);
        }
    };
    if let Some(out) = &job.out_dir {
        let p = Progress { update: job.train.max_steps, videos_seen };
        detector.save(&out.join(FINAL_CHECKPOINT), meta(p, "final"))?;
        let mut text = String::new();
        for r in &log {
            text.push_str(&serde_json::to_string(r).expect("log serializes"));
            text.push('\n');
        }
        let path = out.join(METRICS_LOG);
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(TrainOutcome { detector, best, log, warmup_losses, videos_seen })
}
