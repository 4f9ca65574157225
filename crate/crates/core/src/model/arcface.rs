//! Additive angular margin loss over the two classes (real, fake).
//!
//! Features and class centres are L2-normalized, the cosine of their angle
//! is clamped to `[-1+ε, 1-ε]`, the true-class angle is widened by `m` and
//! the scaled cosines go through softmax cross-entropy.

use afw_tensor::{Real, Tape, Tensor, TensorError, Var};

use crate::error::Result;

pub const CLASS_WEIGHT: &str = "arcface/class_weight";
pub const COS_CLAMP: f64 = 1e-7;

/// Mean angular-margin cross-entropy of `[B,D]` features against
/// `[C,D]` class centres. `labels[i] < C`.
pub fn arcface_loss<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    class_weight: Var,
    scale: f64,
    margin: f64,
) -> Result<Var> {
    let (b, classes) = (tape.shape(features)[0], tape.shape(class_weight)[0]);
    if labels.len() != b || labels.iter().any(|&y| y >= classes) {
        return Err(TensorError::Contract(format!("arcface_loss: {} labels for {b} features over {classes} classes", labels.len())).into());
    }
    let f = tape.l2_normalize_rows(features)?;
    let w = tape.l2_normalize_rows(class_weight)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(f, wt)?;
    let cos = tape.clamp(cos, T::of(-1.0 + COS_CLAMP), T::of(1.0 - COS_CLAMP))?;
    let theta = tape.acos(cos)?;
    let mut shift = Tensor::<T>::zeros(&[b, classes]).into_data();
    let mut onehot = shift.clone();
    for (i, &y) in labels.iter().enumerate() {
        shift[i * classes + y] = T::of(margin);
        onehot[i * classes + y] = T::one();
    }
    let shift = tape.input(&[b, classes], shift)?;
    let theta = tape.add(theta, shift)?;
    let logits = tape.cos(theta)?;
    let logits = tape.scale(logits, T::of(scale))?;
    let logp = tape.log_softmax_rows(logits)?;
    let onehot = tape.input(&[b, classes], onehot)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, T::of(-1.0 / b as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use afw_tensor::ParamStore;

    fn loss_of(features: Vec<f64>, dim: usize, labels: &[usize], weight: Vec<f64>, s: f64, m: f64) -> f64 {
        let mut tape = Tape::new();
        let b = labels.len();
        let f = tape.input(&[b, dim], features).unwrap();
        let w = tape.input(&[2, dim], weight).unwrap();
        let l = arcface_loss(&mut tape, f, labels, w, s, m).unwrap();
        tape.item(l)
    }

    #[test]
    fn aligned_feature_with_opposite_centres() {
        // cos = [1, -1] → −ln(e¹ / (e¹ + e⁻¹)) = ln(1 + e⁻²)
        let got = loss_of(vec![2.0, 0.0], 2, &[0], vec![1.0, 0.0, -1.0, 0.0], 1.0, 0.0);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn zero_margin_is_plain_softmax_on_scaled_cosines() {
        let f = vec![0.3, -1.2, 0.5, 0.9, 0.1, -0.4];
        let w = vec![1.0, 0.5, -0.2, -0.3, 0.8, 0.4];
        let labels = [1, 0];
        let got = loss_of(f.clone(), 3, &labels, w.clone(), 4.0, 0.0);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let fi = &f[i * 3..i * 3 + 3];
            let logits: Vec<f64> = (0..2)
                .map(|c| {
                    let wc = &w[c * 3..c * 3 + 3];
                    4.0 * fi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>() / (norm(fi) * norm(wc))
                })
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            want += lse - logits[y];
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn margin_never_lowers_loss_for_aligned_inputs() {
        for k in 0..20 {
            let a = k as f64 * 0.07;
            let f = vec![a.cos(), a.sin()];
            let w = vec![1.0, 0.0, -1.0, 0.2];
            let l0 = loss_of(f.clone(), 2, &[0], w.clone(), 30.0, 0.0);
            let lm = loss_of(f, 2, &[0], w, 30.0, 0.35);
            assert!(lm >= l0 && l0 >= 0.0);
        }
    }

    #[test]
    fn zero_feature_is_a_numeric_fault() {
        let mut tape = Tape::<f64>::new();
        let f = tape.input(&[1, 2], vec![0.0, 0.0]).unwrap();
        let w = tape.input(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let err = arcface_loss(&mut tape, f, &[0], w, 30.0, 0.35).unwrap_err();
        assert!(matches!(err, crate::CoreError::Tensor(TensorError::NumericFault { .. })));
    }

    #[test]
    fn gradient_flows_to_features_and_centres() {
        let mut store = ParamStore::<f64>::new();
        let fid = store.add("f", Tensor::new(&[2, 2], vec![0.5, 0.1, -0.2, 0.7]).unwrap().with_requires_grad(true)).unwrap();
        let wid = store.add("w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap().with_requires_grad(true)).unwrap();
        let mut tape = Tape::new();
        let (f, w) = (tape.param(&store, fid), tape.param(&store, wid));
        let l = arcface_loss(&mut tape, f, &[0, 1], w, 30.0, 0.35).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(fid).is_some() && g.get(wid).is_some());
    }
}
