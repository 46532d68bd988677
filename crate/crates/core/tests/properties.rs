mod support;

use approx::assert_relative_eq;
use deep_preimage::data::{self, DifferenceMap, Mask};
use deep_preimage::estimator::{ranking_loss, Pairing};
use deep_preimage::model::softmax;
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|m| {
        (
            prop::collection::vec(0.0f64..5.0, 2 * m),
            prop::collection::vec(-5.0f64..5.0, 2 * m),
        )
    })
}

fn pairing() -> impl Strategy<Value = Pairing> {
    prop_oneof![Just(Pairing::Halves), Just(Pairing::AllPairs)]
}

proptest! {
    #[test]
    fn ranking_loss_is_non_negative((ell, est) in batch(), gamma in 0.0f64..3.0, p in pairing()) {
        prop_assert!(ranking_loss(&ell, &est, gamma, p).unwrap() >= 0.0);
    }

    #[test]
    fn ranking_loss_matches_term_by_term_oracle((ell, est) in batch(), gamma in 0.0f64..3.0, p in pairing()) {
        let got = ranking_loss(&ell, &est, gamma, p).unwrap();
        prop_assert_eq!(got.to_bits(), support::brute_force_ranking(&ell, &est, gamma, p).to_bits());
    }

    #[test]
    fn ranking_loss_ignores_estimate_shift((ell, est) in batch(), c in -10.0f64..10.0, p in pairing()) {
        let shifted: Vec<f64> = est.iter().map(|e| e + c).collect();
        let a = ranking_loss(&ell, &est, 1.0, p).unwrap();
        let b = ranking_loss(&ell, &shifted, 1.0, p).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn ranking_loss_depends_only_on_true_loss_order((ell, est) in batch(), p in pairing()) {
        let warped: Vec<f64> = ell.iter().map(|l| (3.0 * l).exp() - 7.0).collect();
        prop_assert_eq!(
            ranking_loss(&ell, &est, 1.0, p).unwrap(),
            ranking_loss(&warped, &est, 1.0, p).unwrap()
        );
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&row), softmax(&shifted));
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*x >= 0.0);
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn localization_ratio_is_scale_free(
        values in prop::collection::vec(0.0f64..1.0, 16),
        inside in prop::collection::vec(any::<bool>(), 16),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(values.iter().sum::<f64>() > 1e-6);
        let mask = Mask::new(4, 4, inside).unwrap();
        let a = DifferenceMap::new(4, 4, values.clone()).unwrap();
        let b = DifferenceMap::new(4, 4, values.iter().map(|v| v * scale).collect()).unwrap();
        let ra = data::localization_ratio(&a, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&ra));
        assert_relative_eq!(ra, data::localization_ratio(&b, &mask).unwrap(), epsilon = 1e-12);
    }
}
