use afw_core::boosting::{combine_afw_logit, combine_gru};
use afw_core::model::afw::{afw_logit, afw_probability, logit_mean_probability};
use proptest::prelude::*;

const EPS: f64 = 1e-8;

fn faces() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((-10.0f64..10.0, 0.01f64..5.0), 1..30)
}

fn split(f: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    f.iter().copied().unzip()
}

proptest! {
    #[test]
    fn weight_scale_leaves_logit_unchanged(f in faces(), k in 0.1f64..50.0) {
        let (l, w) = split(&f);
        let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
        prop_assert!((afw_logit(&l, &w, 0.0).unwrap() - afw_logit(&l, &scaled, 0.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn face_order_is_irrelevant(f in faces(), seed in any::<u64>()) {
        let (l, w) = split(&f);
        let mut g = f.clone();
        let n = g.len();
        for i in (1..n).rev() {
            g.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let (lp, wp) = split(&g);
        prop_assert!((afw_logit(&l, &w, EPS).unwrap() - afw_logit(&lp, &wp, EPS).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn logit_stays_in_convex_hull(f in faces()) {
        let (l, w) = split(&f);
        let z = afw_logit(&l, &w, EPS).unwrap();
        let lo = l.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(z >= lo.min(0.0) - 1e-9 && z <= hi.max(0.0) + 1e-9);
        prop_assert!((0.0..=1.0).contains(&afw_probability(&l, &w, EPS).unwrap()));
    }

    #[test]
    fn equal_weights_reduce_to_logit_mean(f in faces(), c in 0.5f64..3.0) {
        let (l, _) = split(&f);
        let w = vec![c; l.len()];
        prop_assert!((afw_probability(&l, &w, 0.0).unwrap() - logit_mean_probability(&l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_boost_weights_reduce_combination(f in faces(), lb in -10.0f64..10.0) {
        let (l, w) = split(&f);
        let zeros = vec![0.0; l.len()];
        let other = vec![lb; l.len()];
        prop_assert_eq!(combine_afw_logit(&w, &l, &zeros, &other, EPS).unwrap(), afw_logit(&l, &w, EPS).unwrap());
    }

    #[test]
    fn combine_gru_is_symmetric_and_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, d in 0.01f64..5.0) {
        prop_assert_eq!(combine_gru(a, b), combine_gru(b, a));
        prop_assert!(combine_gru(a + d, b) >= combine_gru(a, b));
    }
}
