//! Balanced accuracy and clipped log-loss.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_CLIP: f64 = 1e-15;

/// A metric that may be undefined for a given sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Value(f64),
    Absent { reason: String },
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Absent { .. } => None,
        }
    }
}

fn check_lengths(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(CoreError::data(format!("{} predictions but {} labels", p.len(), y.len())));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::data("predictions must lie in [0, 1]"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::data("labels must be 0 or 1"));
    }
    Ok(())
}

/// `(TPR + TNR) / 2` with fake (1) as the positive class; `p ≥ threshold`
/// counts as fake, so ties go to fake. Absent unless both classes occur.
pub fn balanced_accuracy(p: &[f64], y: &[f64], threshold: f64) -> Result<Metric> {
    check_lengths(p, y)?;
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in p.iter().zip(y) {
        let hit = p >= threshold;
        if y == 1.0 {
            pos += 1;
            tp += hit as usize;
        } else {
            neg += 1;
            tn += !hit as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Ok(Metric::Absent { reason: format!("needs both classes ({pos} fake, {neg} real)") });
    }
    Ok(Metric::Value((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0))
}

/// Mean binary cross-entropy with predictions clipped to `[clip, 1−clip]`.
pub fn log_loss(p: &[f64], y: &[f64], clip: f64) -> Result<f64> {
    check_lengths(p, y)?;
    if p.is_empty() {
        return Err(CoreError::data("log-loss of an empty set"));
    }
    if !(clip > 0.0 && clip < 0.5) {
        return Err(CoreError::data("clip must lie in (0, 0.5)"));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            // Clipping 1 - p directly keeps the ceiling at exactly -ln(clip).
            let q = p.clamp(clip, 1.0 - clip);
            let r = (1.0 - p).clamp(clip, 1.0 - clip);
            -(y * q.ln() + (1.0 - y) * r.ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_accuracy_examples() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(balanced_accuracy(&y, &y, 0.5).unwrap(), Metric::Value(1.0));
        assert_eq!(balanced_accuracy(&[0.9, 0.2, 0.6, 0.4], &y, 0.5).unwrap(), Metric::Value(1.0));
        let mut labels = vec![1.0; 90];
        labels.extend(vec![0.0; 10]);
        assert_eq!(balanced_accuracy(&[0.5; 100], &labels, 0.5).unwrap(), Metric::Value(0.5));
        assert!(matches!(balanced_accuracy(&[0.3], &[1.0], 0.5).unwrap(), Metric::Absent { .. }));
    }

    #[test]
    fn ties_count_as_fake() {
        assert_eq!(balanced_accuracy(&[0.5, 0.49], &[1.0, 0.0], 0.5).unwrap(), Metric::Value(1.0));
    }

    #[test]
    fn log_loss_examples() {
        assert!((log_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0], DEFAULT_CLIP).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(log_loss(&[1.0, 0.0], &[1.0, 0.0], DEFAULT_CLIP).unwrap() < 1e-14);
        let worst = log_loss(&[1.0], &[0.0], DEFAULT_CLIP).unwrap();
        assert!((worst - 34.538776).abs() < 1e-4, "{worst}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(log_loss(&[0.5], &[1.0, 0.0], DEFAULT_CLIP).is_err());
        assert!(log_loss(&[1.5], &[1.0], DEFAULT_CLIP).is_err());
        assert!(balanced_accuracy(&[0.5], &[2.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn order_invariance(pairs in proptest::collection::vec((0.0f64..=1.0, proptest::bool::ANY), 2..40), seed in 0u64..1000) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            let k = seed as usize % idx.len();
            idx.rotate_left(k);
            idx.reverse();
            let (p2, y2): (Vec<f64>, Vec<f64>) = idx.iter().map(|&i| (p[i], y[i])).unzip();
            let a = log_loss(&p, &y, DEFAULT_CLIP).unwrap();
            let b = log_loss(&p2, &y2, DEFAULT_CLIP).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(balanced_accuracy(&p, &y, 0.5).unwrap(), balanced_accuracy(&p2, &y2, 0.5).unwrap());
            if let Metric::Value(v) = balanced_accuracy(&p, &y, 0.5).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn smaller_clip_never_lowers_loss(
            samples in proptest::collection::vec((0.01f64..0.99, proptest::bool::ANY, proptest::bool::ANY), 1..30),
            a in 1e-15f64..1e-3,
            b in 1e-15f64..1e-3,
        ) {
            // imperfect: either hedged, or confidently wrong
            let p: Vec<f64> = samples.iter().map(|&(p, y, wrong)| if wrong { 1.0 - y as u8 as f64 } else { p }).collect();
            let y: Vec<f64> = samples.iter().map(|x| x.1 as u8 as f64).collect();
            let (small, large) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(log_loss(&p, &y, small).unwrap() >= log_loss(&p, &y, large).unwrap() - 1e-12);
        }
    }
}
