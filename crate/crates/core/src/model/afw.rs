//! Automatic face weighting: a weighted mean of per-face logits, the
//! weights learned and non-negative, squashed to a video probability.

use afw_tensor::{Real, Tape, Var};

use crate::error::{CoreError, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_faces(l: &[f64], w: &[f64]) -> Result<()> {
    if l.is_empty() {
        return Err(CoreError::data("face weighting needs at least one face"));
    }
    if l.len() != w.len() {
        return Err(CoreError::data(format!("{} logits but {} weights", l.len(), w.len())));
    }
    if let Some(bad) = w.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(CoreError::data(format!("face weight {bad} is not a finite non-negative value")));
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::data("non-finite face logit"));
    }
    Ok(())
}

/// `Σ w_j l_j / (Σ w_j + eps)`.
pub fn afw_logit(l: &[f64], w: &[f64], eps: f64) -> Result<f64> {
    check_faces(l, w)?;
    let num: f64 = l.iter().zip(w).map(|(l, w)| l * w).sum();
    let den: f64 = w.iter().sum::<f64>() + eps;
    Ok(num / den)
}

pub fn afw_probability(l: &[f64], w: &[f64], eps: f64) -> Result<f64> {
    afw_logit(l, w, eps).map(sigmoid)
}

/// Unweighted baseline: sigmoid of the mean logit.
pub fn logit_mean_probability(l: &[f64]) -> Result<f64> {
    if l.is_empty() {
        return Err(CoreError::data("logit mean needs at least one face"));
    }
    Ok(sigmoid(l.iter().sum::<f64>() / l.len() as f64))
}

/// Tape version of [`afw_logit`] over `[N,1]` logits and weights; `[1]` out.
pub fn afw_logit_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, weights: Var, eps: f64) -> Result<Var> {
    let lw = tape.mul(logits, weights)?;
    let num = tape.sum(lw)?;
    let den = tape.sum(weights)?;
    let den = tape.add_scalar(den, T::of(eps))?;
    Ok(tape.div(num, den)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_logit_is_half() {
        assert_eq!(afw_probability(&[0.0], &[1.0], DEFAULT_EPS).unwrap(), 0.5);
    }

    #[test]
    fn two_face_example() {
        let p = afw_probability(&[2.0, -1.0], &[1.0, 3.0], DEFAULT_EPS).unwrap();
        assert!((p - 0.437_823_499_6).abs() < 1e-6, "{p}");
    }

    #[test]
    fn all_zero_weights_give_half() {
        let p = afw_probability(&[5.0, -3.0, 9.0], &[0.0; 3], DEFAULT_EPS).unwrap();
        assert!((p - 0.5).abs() < 1e-6);
    }

    #[test]
    fn duplicating_faces_is_a_no_op() {
        let (l, w) = ([0.3, -2.0, 1.1], [0.5, 2.0, 0.1]);
        let p = afw_probability(&l, &w, DEFAULT_EPS).unwrap();
        let l2: Vec<f64> = l.iter().chain(l.iter()).copied().collect();
        let w2: Vec<f64> = w.iter().chain(w.iter()).copied().collect();
        assert!((afw_probability(&l2, &w2, DEFAULT_EPS).unwrap() - p).abs() < 1e-8);
    }

    #[test]
    fn rejects_empty_mismatched_and_negative() {
        assert!(afw_probability(&[], &[], DEFAULT_EPS).is_err());
        assert!(afw_probability(&[1.0], &[1.0, 2.0], DEFAULT_EPS).is_err());
        assert!(afw_probability(&[1.0], &[-0.1], DEFAULT_EPS).is_err());
    }

    #[test]
    fn tape_matches_scalar() {
        let (l, w) = (vec![0.7, -1.3, 2.2, 0.1], vec![0.2, 1.5, 0.0, 3.0]);
        let mut tape = Tape::<f64>::new();
        let lv = tape.input(&[4, 1], l.clone()).unwrap();
        let wv = tape.input(&[4, 1], w.clone()).unwrap();
        let z = afw_logit_on_tape(&mut tape, lv, wv, DEFAULT_EPS).unwrap();
        assert!((tape.item(z) - afw_logit(&l, &w, DEFAULT_EPS).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
