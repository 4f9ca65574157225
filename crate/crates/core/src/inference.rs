//! Video scoring with stage selection and test-time augmentation.
//!
//! TTA re-crops every detected box from frames shifted by each offset
//! (clamped to the video), mirrors some sequences at random, scores each
//! sequence and averages the final probabilities.

use serde::{Deserialize, Serialize};

use crate::data::{crop_track, detect_faces, Detection, FaceProvider, FaceTrack, Manifest, VideoRecord};
use crate::detector::{Detector, Scores};
use crate::error::{CoreError, Result};
use crate::model::afw::sigmoid;
use crate::seed::{fnv1a, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaAverage {
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub enabled: bool,
    pub offsets: Vec<i64>,
    pub flip_probability: f64,
    pub seed: u64,
    pub average: TtaAverage,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig { enabled: true, offsets: vec![-2, -1, 0, 1, 2], flip_probability: 0.5, seed: 0, average: TtaAverage::Probability }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(CoreError::config("TTA needs at least one offset"));
        }
        let mut seen = self.offsets.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.offsets.len() {
            return Err(CoreError::config("TTA offsets must be distinct"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(CoreError::config("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaSequence {
    pub offset: i64,
    pub flipped: bool,
    pub track: FaceTrack,
}

/// One sequence per offset; the same boxes are cropped from the shifted
/// frames. Each sequence is mirrored with `flip_probability`, drawn from a
/// stream seeded by the TTA seed and the video id.
pub fn build_tta_sequences(
    manifest: &Manifest,
    record: &VideoRecord,
    detections: &[Detection],
    track: &crate::data::TrackConfig,
    tta: &TtaConfig,
) -> Result<Vec<TtaSequence>> {
    tta.validate()?;
    if detections.is_empty() {
        return Err(CoreError::data(format!("video `{}`: no face boxes to augment", record.video_id)));
    }
    let mut rng = rng_for(tta.seed ^ fnv1a(record.video_id.as_bytes()), "tta-flip");
    tta.offsets
        .iter()
        .map(|&offset| {
            let flipped = rand::Rng::random_bool(&mut rng, tta.flip_probability);
            let t = crop_track(manifest, record, detections, track, offset)?;
            Ok(TtaSequence { offset, flipped, track: if flipped { t.flipped() } else { t } })
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    let q = p.clamp(1e-15, 1.0 - 1e-15);
    (q / (1.0 - q)).ln()
}

/// Mean of per-sequence final probabilities (or of their logits).
pub fn average_predictions(per_sequence: &[f64], how: TtaAverage) -> Result<f64> {
    if per_sequence.is_empty() {
        return Err(CoreError::data("no sequences to average"));
    }
    let n = per_sequence.len() as f64;
    Ok(match how {
        TtaAverage::Probability => per_sequence.iter().sum::<f64>() / n,
        TtaAverage::Logit => sigmoid(per_sequence.iter().map(|&p| logit(p)).sum::<f64>() / n),
    })
}

pub fn tta_predict(detector: &Detector<f32>, sequences: &[TtaSequence], how: TtaAverage) -> Result<f64> {
    let p = sequences.iter().map(|s| detector.score_track(&s.track).map(|sc| sc.final_probability())).collect::<Result<Vec<_>>>()?;
    average_predictions(&p, how)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LogitMean,
    Afw,
    Gru,
    Boosted,
    BoostedTta,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::LogitMean, Stage::Afw, Stage::Gru, Stage::Boosted, Stage::BoostedTta];

    pub fn name(self) -> &'static str {
        match self {
            Stage::LogitMean => "logit-mean",
            Stage::Afw => "afw",
            Stage::Gru => "gru",
            Stage::Boosted => "boosted",
            Stage::BoostedTta => "boosted+tta",
        }
    }

    pub fn needs_boost(self) -> bool {
        matches!(self, Stage::Boosted | Stage::BoostedTta)
    }

    /// The stage's probability from plain (non-augmented) scores.
    pub fn pick(self, s: &Scores) -> Option<f64> {
        match self {
            Stage::LogitMean => Some(s.p_logit_mean),
            Stage::Afw => Some(s.p_w),
            Stage::Gru => Some(s.p_rnn),
            Stage::Boosted => s.boost.as_ref().map(|b| b.p_rnn),
            Stage::BoostedTta => None,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| CoreError::data(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub stage: Stage,
    pub probability: f64,
    pub n_faces: usize,
    pub no_face: bool,
}

pub const NO_FACE_PROBABILITY: f64 = 0.5;

/// Scores one video at the requested stage. Videos without any face get
/// 0.5 and the `no_face` flag.
pub fn predict_video(
    detector: &Detector<f32>,
    manifest: &Manifest,
    record: &VideoRecord,
    provider: &dyn FaceProvider,
    stage: Stage,
    tta: &TtaConfig,
) -> Result<VideoScore> {
    if stage.needs_boost() && detector.boost.is_none() {
        return Err(CoreError::Checkpoint(format!("stage `{stage}` needs a boosting replica in the checkpoint")));
    }
    let detections = detect_faces(manifest, record, provider, &detector.track)?;
    let mut score = VideoScore {
        video_id: record.video_id.clone(),
        stage,
        probability: NO_FACE_PROBABILITY,
        n_faces: detections.len(),
        no_face: detections.is_empty(),
    };
    if detections.is_empty() {
        return Ok(score);
    }
    score.probability = if stage == Stage::BoostedTta && tta.enabled {
        let seqs = build_tta_sequences(manifest, record, &detections, &detector.track, tta)?;
        tta_predict(detector, &seqs, tta.average)?
    } else {
        let track = crop_track(manifest, record, &detections, &detector.track, 0)?;
        let s = detector.score_track(&track)?;
        stage.pick(&s).unwrap_or_else(|| s.final_probability())
    };
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging() {
        let p = average_predictions(&[0.9, 0.5, 0.7, 0.3, 0.6], TtaAverage::Probability).unwrap();
        assert!((p - 0.6).abs() < 1e-12);
        let q = average_predictions(&[0.8, 0.8], TtaAverage::Logit).unwrap();
        assert!((q - 0.8).abs() < 1e-12);
        assert!(average_predictions(&[], TtaAverage::Probability).is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TtaConfig { offsets: vec![0, 0], ..Default::default() }.validate().is_err());
        assert!(TtaConfig { flip_probability: 1.5, ..Default::default() }.validate().is_err());
        assert!(TtaConfig { offsets: vec![], ..Default::default() }.validate().is_err());
    }
}
