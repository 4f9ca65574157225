//! Per-split evaluation: every stage's probability for every video, and
//! the balanced accuracy and log-loss of each stage.

use serde::{Deserialize, Serialize};

use crate::data::{crop_track, detect_faces, FaceProvider, Label, Manifest, Split};
use crate::detector::Detector;
use crate::error::{CoreError, Result};
use crate::inference::{build_tta_sequences, tta_predict, Stage, TtaConfig, NO_FACE_PROBABILITY};
use crate::metrics::{balanced_accuracy, log_loss, Metric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub label: Label,
    pub n_faces: usize,
    pub no_face: bool,
    pub p_logit_mean: f64,
    pub p_w: f64,
    pub p_rnn: f64,
    /// Gru logit, surfaced for the boosted combination.
    pub l_rnn: f64,
    pub p_w_boosted: Option<f64>,
    pub p_rnn_boosted: Option<f64>,
    pub p_tta: Option<f64>,
}

impl VideoPrediction {
    pub fn stage(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::LogitMean => Some(self.p_logit_mean),
            Stage::Afw => Some(self.p_w),
            Stage::Gru => Some(self.p_rnn),
            Stage::Boosted => self.p_rnn_boosted,
            Stage::BoostedTta => self.p_tta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetric {
    pub stage: Stage,
    pub balanced_accuracy: Metric,
    pub log_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub real: usize,
    pub fake: usize,
    pub no_face: usize,
    pub stages: Vec<StageMetric>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageMetric> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub report: MetricReport,
    pub predictions: Vec<VideoPrediction>,
}

/// Scores every video of `split`. TTA runs when `tta` is given and
/// enabled; it averages the boosted output when a replica is loaded.
pub fn evaluate_split(
    detector: &Detector<f32>,
    manifest: &Manifest,
    split: Split,
    provider: &dyn FaceProvider,
    tta: Option<&TtaConfig>,
    clip: f64,
) -> Result<SplitEvaluation> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(CoreError::data(format!("split `{split}` is empty")));
    }
    let tta = tta.filter(|t| t.enabled);
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        let detections = detect_faces(manifest, r, provider, &detector.track)?;
        let boosted = detector.boost.is_some();
        let mut p = VideoPrediction {
            video_id: r.video_id.clone(),
            label: r.label,
            n_faces: detections.len(),
            no_face: detections.is_empty(),
            p_logit_mean: NO_FACE_PROBABILITY,
            p_w: NO_FACE_PROBABILITY,
            p_rnn: NO_FACE_PROBABILITY,
            l_rnn: 0.0,
            p_w_boosted: boosted.then_some(NO_FACE_PROBABILITY),
            p_rnn_boosted: boosted.then_some(NO_FACE_PROBABILITY),
            p_tta: tta.map(|_| NO_FACE_PROBABILITY),
        };
        if !detections.is_empty() {
            let track = crop_track(manifest, r, &detections, &detector.track, 0)?;
            let s = detector.score_track(&track)?;
            p.p_logit_mean = s.p_logit_mean;
            p.p_w = s.p_w;
            p.p_rnn = s.p_rnn;
            p.l_rnn = s.gru_logit;
            p.p_w_boosted = s.boost.as_ref().map(|b| b.p_w);
            p.p_rnn_boosted = s.boost.as_ref().map(|b| b.p_rnn);
            if let Some(t) = tta {
                let seqs = build_tta_sequences(manifest, r, &detections, &detector.track, t)?;
                p.p_tta = Some(tta_predict(detector, &seqs, t.average)?);
            }
        }
        predictions.push(p);
    }
    let y: Vec<f64> = predictions.iter().map(|p| p.label.target()).collect();
    let mut stages = Vec::new();
    for stage in Stage::ALL {
        let Some(p) = predictions.iter().map(|v| v.stage(stage)).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        stages.push(StageMetric { stage, balanced_accuracy: balanced_accuracy(&p, &y, 0.5)?, log_loss: log_loss(&p, &y, clip)? });
    }
    let (real, fake) = manifest.class_counts(split);
    let report = MetricReport {
        split,
        real,
        fake,
        no_face: predictions.iter().filter(|p| p.no_face).count(),
        stages,
        seed: None,
        config: serde_json::to_value(detector.meta("eval")).expect("meta serializes"),
    };
    Ok(SplitEvaluation { report, predictions })
}
