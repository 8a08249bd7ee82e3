//! Property tests over the core invariants.

use driftscope::classifier::{ClassifierConfig, Position, RecencyClassifier};
use driftscope::conformal::{conformal_pvalue, mixture_update};
use driftscope::monitor::{martingale_update, MartingaleParams, MartingaleState};
use driftscope::pipeline::{EnvParams, Environment};
use driftscope::shiftlab::{inject, schedule_shifts, Ramp, ShiftKind, ShiftState};
use driftscope::Rng;
use proptest::prelude::*;

proptest! {
    #[test]
    fn martingale_matches_closed_form(zs in proptest::collection::vec(0u8..=1, 0..400)) {
        let params = MartingaleParams::default();
        let mut st = MartingaleState::new(params);
        for &z in &zs {
            st = martingale_update(&st, z).unwrap();
        }
        let n = zs.len() as f64;
        let s = zs.iter().map(|&z| f64::from(z)).sum::<f64>();
        let exact = (params.tilt * s - n * ((1.0 - params.p) + params.p * params.tilt.exp()).ln()).exp();
        prop_assert!((st.m - exact).abs() <= 1e-9 * exact);
        prop_assert_eq!(st.n, zs.len() as u64);
        prop_assert!(st.m > 0.0);
    }

    #[test]
    fn martingale_rejects_bad_indicator(z in 2u8..) {
        let st = MartingaleState::new(MartingaleParams::default());
        prop_assert!(martingale_update(&st, z).is_err());
    }

    #[test]
    fn pvalues_lie_in_unit_interval(
        scores in proptest::collection::vec(-5.0f64..5.0, 1..60),
        u in 0.0001f64..=1.0,
    ) {
        let p = conformal_pvalue(&scores, u);
        prop_assert!(p > 0.0 && p <= 1.0, "{}", p);
    }

    #[test]
    fn mixture_of_ones_is_reciprocal(n in 1usize..40) {
        // ∫₀¹ εⁿ dε = 1/(n+1).
        let v = mixture_update(&vec![1.0; n]).unwrap();
        prop_assert!((v - 1.0 / (n as f64 + 1.0)).abs() <= 1e-4);
    }

    #[test]
    fn classifier_score_is_antisymmetric(
        a in proptest::collection::vec(-3.0f64..3.0, 3),
        b in proptest::collection::vec(-3.0f64..3.0, 3),
        seed in any::<u64>(),
        hidden in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let config = ClassifierConfig { learning_rate: 0.1, hidden: hidden.then_some(8) };
        let mut clf = RecencyClassifier::new(3, &config, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal() + 1.0).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            clf.train_pair(&x, &y, Position::First).unwrap();
        }
        let s_ab = clf.score(&a, &b).unwrap();
        let s_ba = clf.score(&b, &a).unwrap();
        prop_assert!((s_ab + s_ba).abs() <= 1e-12 * (1.0 + s_ab.abs()));
        prop_assert_eq!(clf.score(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ramp_law(step in 0.1f64..5.0, max in 1.0f64..200.0, s in 0usize..500) {
        let r = Ramp { step, max };
        prop_assert_eq!(r.sigma(s), (s as f64 * step).min(max));
    }

    #[test]
    fn schedule_is_sorted_and_in_horizon(horizon in 1usize..3000, lambda in 1.0f64..500.0, seed in any::<u64>()) {
        let s = schedule_shifts(horizon, lambda, &mut Rng::new(seed));
        prop_assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert!(s.iter().all(|&(at, k)| at > 0 && at < horizon
            && matches!(k, ShiftKind::SensorDegradation | ShiftKind::EnvironmentShift)));
    }

    #[test]
    fn degradation_keeps_labels(seed in any::<u64>(), elapsed in 0usize..80) {
        let env = Environment::new(EnvParams::default()).unwrap();
        let mut rng = Rng::new(seed);
        let episode = env.generate_episode(seed, &mut rng);
        let mut st = ShiftState::new(Ramp::GENTLE, EnvParams::default().shifted());
        st.begin(ShiftKind::SensorDegradation, 0);
        st.advance(elapsed);
        let shifted = inject(ShiftKind::SensorDegradation, &st, &episode, &mut rng).unwrap();
        prop_assert_eq!(shifted.truth(), episode.truth());
        prop_assert_eq!(shifted.len(), episode.len());
    }

    #[test]
    fn substreams_are_reproducible(seed in any::<u64>(), tag in any::<u64>()) {
        let a: Vec<f64> = { let mut r = Rng::new(seed).substream(&[tag]); (0..5).map(|_| r.uniform()).collect() };
        let b: Vec<f64> = { let mut r = Rng::new(seed).substream(&[tag]); (0..5).map(|_| r.uniform()).collect() };
        prop_assert_eq!(a, b);
    }
}
