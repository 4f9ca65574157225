mod common;

use afw_core::data::{FaceTrack, ManifestFaces, TrackConfig};
use afw_core::data::{Label, Split};
use afw_core::model::ModelConfig;
use afw_core::model::{bce_with_logit, Network};
use afw_core::trainer::{param_hash, train, train_loop, warmup_arcface, LossToggles, TrainConfig, TrainJob, METRICS_LOG};
use afw_core::CoreError;
use afw_tensor::{Adam, ParamStore, Tape};
use common::*;

fn quiet(max_steps: u64) -> TrainConfig {
    TrainConfig {
        videos_per_update: 4,
        frames_per_arcface_update: 8,
        arcface_frames_per_video: 2,
        warmup_arcface_batches: 0,
        max_steps,
        flip_probability: 0.0,
        validate_every: 0,
        ..TrainConfig::default()
    }
}

fn fixture() -> (tempfile::TempDir, Vec<FaceTrack>) {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 12, 3);
    let t = tracks(&m, Split::Train).tracks;
    assert!(t.iter().any(|t| t.label == Label::Real) && t.iter().any(|t| t.label == Label::Fake));
    (dir, t)
}

fn run(store: &mut ParamStore<f64>, net: &Network, t: &[FaceTrack], cfg: &TrainConfig) -> Vec<afw_core::trainer::LogRecord> {
    let mut order = (0..t.len()).cycle();
    train_loop(net, store, t, &mut order, cfg, &mut |_, _| Ok(())).unwrap()
}

#[test]
fn disabled_losses_leave_parameters_untouched() {
    let (_d, t) = fixture();
    let (net, mut store) = Network::init::<f64>(&tiny_model(), 1).unwrap();
    let before = param_hash(&store, &[""]);
    let cfg = TrainConfig { losses: LossToggles { bce_pw: false, bce_rnn: false, arcface: false }, ..quiet(3) };
    run(&mut store, &net, &t, &cfg);
    assert_eq!(param_hash(&store, &[""]), before);
}

#[test]
fn arcface_alone_never_touches_heads_or_gru() {
    let (_d, t) = fixture();
    let (net, mut store) = Network::init::<f64>(&tiny_model(), 2).unwrap();
    let heads = param_hash(&store, &["afw/", "gru/"]);
    let backbone = param_hash(&store, &["backbone/"]);
    let cfg = TrainConfig { losses: LossToggles { bce_pw: false, bce_rnn: false, arcface: true }, ..quiet(4) };
    let log = run(&mut store, &net, &t, &cfg);
    assert!(log.iter().all(|r| r.loss == "arcface") && !log.is_empty());
    assert_eq!(param_hash(&store, &["afw/", "gru/"]), heads);
    assert_ne!(param_hash(&store, &["backbone/"]), backbone);
}

#[test]
fn face_weighted_bce_alone_never_touches_gru() {
    let (_d, t) = fixture();
    let (net, mut store) = Network::init::<f64>(&tiny_model(), 3).unwrap();
    let gru = param_hash(&store, &["gru/"]);
    let heads = param_hash(&store, &["afw/"]);
    let cfg = TrainConfig { losses: LossToggles { bce_pw: true, bce_rnn: false, arcface: false }, ..quiet(3) };
    run(&mut store, &net, &t, &cfg);
    assert_eq!(param_hash(&store, &["gru/"]), gru);
    assert_ne!(param_hash(&store, &["afw/"]), heads);
}

#[test]
fn accumulated_update_equals_one_step_on_the_summed_loss() {
    let (_d, t) = fixture();
    let cfg = TrainConfig { losses: LossToggles { bce_pw: true, bce_rnn: true, arcface: false }, ..quiet(1) };
    let (net, mut a) = Network::init::<f64>(&tiny_model(), 4).unwrap();
    let mut b = a.clone();
    run(&mut a, &net, &t, &cfg);

    let net_b = Network::bind(&tiny_model(), &b).unwrap();
    let mut tape = Tape::new();
    let mut total = None;
    for track in &t[..4] {
        let out = net_b.forward(&mut tape, &b, &track.to_tensor::<f64>().unwrap()).unwrap();
        let y = track.label.target();
        let pw = bce_with_logit(&mut tape, out.afw_logit, y).unwrap();
        let rnn = bce_with_logit(&mut tape, out.gru_logit, y).unwrap();
        let s = tape.add(pw, rnn).unwrap();
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s).unwrap(),
        });
    }
    let g = tape.backward(total.unwrap()).unwrap();
    let mut adam = Adam::new(cfg.adam(), &b, Network::group(&b, &["backbone/", "afw/", "gru/"]));
    adam.step(&mut b, &g).unwrap();

    let mut sq = 0.0;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        sq += x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    assert!(sq.sqrt() < 1e-5, "parameter distance {}", sq.sqrt());
}

#[test]
fn overfits_one_video_within_fifty_updates() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 12, 3);
    let track = TrackConfig { patch_side: 64, ..small_track() };
    let t = afw_core::trainer::TrackSet::load(&m, Split::Train, &ManifestFaces, &track).unwrap().tracks;
    let fake = t.iter().find(|t| t.label == Label::Fake).unwrap().clone();
    let (net, mut store) = Network::init::<f32>(&ModelConfig::default(), 5).unwrap();
    let cfg = TrainConfig { videos_per_update: 1, frames_per_arcface_update: 4, ..quiet(50) };
    let one = [fake];
    let mut order = std::iter::repeat(0);
    let mut reached = None;
    train_loop(&net, &mut store, &one, &mut order, &cfg, &mut |p, s| {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, s, &one[0].to_tensor::<f32>()?)?;
        if reached.is_none() && tape.item(out.p_rnn) > 0.9 {
            reached = Some(p.update);
        }
        Ok(())
    })
    .unwrap();
    let at = reached.expect("p_rnn never exceeded 0.9");
    eprintln!("p_rnn > 0.9 after {at} updates");
    assert!(at <= 50);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (_d, t) = fixture();
    let cfg = quiet(3);
    let go = || {
        let (net, mut store) = Network::init::<f32>(&tiny_model(), 6).unwrap();
        let log = run32(&mut store, &net, &t, &cfg);
        (log, param_hash(&store, &[""]))
    };
    let (a, b) = (go(), go());
    assert_eq!(a, b);
    assert!(a.0.iter().all(|r| r.timestamp.is_none()));
}

fn run32(store: &mut ParamStore<f32>, net: &Network, t: &[FaceTrack], cfg: &TrainConfig) -> Vec<afw_core::trainer::LogRecord> {
    let mut order = (0..t.len()).cycle();
    train_loop(net, store, t, &mut order, cfg, &mut |_, _| Ok(())).unwrap()
}

#[test]
fn warmup_is_optional_and_lowers_the_margin_loss() {
    let (_d, t) = fixture();
    let (net, mut store) = Network::init::<f32>(&tiny_model(), 7).unwrap();
    let before = param_hash(&store, &[""]);
    assert!(warmup_arcface(&net, &mut store, &t, &quiet(1)).unwrap().is_empty());
    assert_eq!(param_hash(&store, &[""]), before);

    let cfg = TrainConfig { warmup_arcface_batches: 40, warmup_batch_size: 16, lr: 3e-3, ..quiet(1) };
    let losses = warmup_arcface(&net, &mut store, &t, &cfg).unwrap();
    assert_eq!(losses.len(), 40);
    let head: f64 = losses[..8].iter().sum::<f64>() / 8.0;
    let tail: f64 = losses[32..].iter().sum::<f64>() / 8.0;
    assert!(tail < head, "warmup loss {head} -> {tail}");
}

#[test]
fn non_finite_parameters_abort_training() {
    let (_d, t) = fixture();
    let (net, mut store) = Network::init::<f32>(&tiny_model(), 8).unwrap();
    let id = store.require("afw/weight.bias").unwrap();
    store.get_mut(id).assign(&[f32::MAX]).unwrap();
    let mut order = (0..t.len()).cycle();
    let err = train_loop(&net, &mut store, &t, &mut order, &quiet(2), &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, CoreError::TrainingFault { step: 1, .. }), "{err}");
}

#[test]
fn full_run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), 16, 9);
    let out = dir.path().join("run");
    let job = TrainJob {
        manifest: &m,
        provider: &ManifestFaces,
        model: tiny_model(),
        track: small_track(),
        train: TrainConfig { warmup_arcface_batches: 2, warmup_batch_size: 4, checkpoint_every_videos: 8, validate_every: 2, ..quiet(4) },
        out_dir: Some(out.clone()),
    };
    let r = train(&job).unwrap();
    assert_eq!(r.videos_seen, 16);
    assert_eq!(r.warmup_losses.len(), 2);
    assert!(r.best.is_some());
    let lines = std::fs::read_to_string(out.join(METRICS_LOG)).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "value", "timestamp"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
    for f in ["final.afw", "best.afw", "videos-000008.afw", "videos-000016.afw"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let (d, meta) = afw_core::Detector::<f32>::load(&out.join("final.afw")).unwrap();
    assert_eq!(meta.updates, 4);
    assert_eq!(param_hash(&d.main, &[""]), param_hash(&r.detector.main, &[""]));
}

#[test]
fn model_and_patch_sides_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 6, 1);
    let mut model = tiny_model();
    model.backbone.input_side = 32;
    let job = TrainJob { manifest: &m, provider: &ManifestFaces, model, track: small_track(), train: quiet(1), out_dir: None };
    assert!(matches!(train(&job), Err(CoreError::Config(_))));
}
