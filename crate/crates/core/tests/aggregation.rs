use fedsel::aggregation::{
    fed_avg, softmax_coefficients, wer_weighted_aggregate, AggregationStrategy, ClientUpdate,
};
use fedsel::device::ClientId;
use fedsel::model::FlatWeights;
use proptest::prelude::*;

fn upd(id: &str, w: Vec<f32>, wer: f64, n: usize) -> ClientUpdate {
    ClientUpdate {
        client_id: ClientId::new(id),
        weights: FlatWeights(w),
        wer,
        n_samples: n,
        batch_time: 200.0,
        battery_drop: 1.0,
    }
}

// exp(0.8) / (exp(0.8) + exp(0.2)) = 1 / (1 + exp(-0.6))
fn two_way_softmax() -> f64 {
    1.0 / (1.0 + (-0.6f64).exp())
}

#[test]
fn two_client_coefficients_match_hand_softmax() {
    let c = softmax_coefficients(&[0.2, 0.8]).unwrap();
    assert!((c[0] - two_way_softmax()).abs() < 1e-12);
    assert!((c[0] - 0.6457).abs() < 1e-4 && (c[1] - 0.3543).abs() < 1e-4);
}

#[test]
fn two_client_aggregate_matches_hand_softmax() {
    let out = wer_weighted_aggregate(&[upd("a", vec![1.0], 0.2, 25), upd("b", vec![0.0], 0.8, 25)]).unwrap();
    assert!((f64::from(out.0[0]) - 0.64566).abs() < 1e-4);
}

#[test]
fn error_rates_above_one_are_clamped() {
    assert_eq!(
        softmax_coefficients(&[1.7, 0.0]).unwrap(),
        softmax_coefficients(&[1.0, 0.0]).unwrap()
    );
}

#[test]
fn identical_updates_are_a_fixed_point() {
    let w = vec![0.1f32, -3.25, 7.0, 1e-6];
    let updates: Vec<_> = (0..5).map(|i| upd(&format!("c{i}"), w.clone(), 0.1 * i as f64, 10 + i)).collect();
    for s in [AggregationStrategy::FedAvg, AggregationStrategy::WerSoftmax] {
        assert_eq!(s.aggregate(&updates).unwrap().0, w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn coefficients_sum_to_one(wers in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
        let c = softmax_coefficients(&wers).unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(c.iter().all(|&v| v > 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn coefficient_falls_as_error_rises(
        wers in proptest::collection::vec(0.0f64..=1.0, 2..8),
        bump in 0.01f64..0.5,
    ) {
        let base = softmax_coefficients(&wers).unwrap();
        let mut worse = wers.clone();
        worse[0] = (worse[0] + bump).min(1.0);
        prop_assume!(worse[0] > wers[0]);
        prop_assert!(softmax_coefficients(&worse).unwrap()[0] < base[0]);
    }

    #[test]
    fn output_is_convex_and_order_free(
        rows in proptest::collection::vec(
            (proptest::collection::vec(-100.0f32..100.0, 4), 0.0f64..=1.0, 1usize..100),
            1..6,
        ),
        rotate in 0usize..6,
    ) {
        let updates: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (w, wer, n))| upd(&format!("c{i}"), w.clone(), *wer, *n))
            .collect();
        let mut shuffled = updates.clone();
        shuffled.rotate_left(rotate % updates.len());
        shuffled.reverse();
        for s in [AggregationStrategy::FedAvg, AggregationStrategy::WerSoftmax] {
            let out = s.aggregate(&updates).unwrap();
            prop_assert_eq!(&out.0, &s.aggregate(&shuffled).unwrap().0);
            for j in 0..4 {
                let lo = rows.iter().map(|r| r.0[j]).fold(f32::INFINITY, f32::min);
                let hi = rows.iter().map(|r| r.0[j]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= out.0[j] && out.0[j] <= hi);
            }
        }
        let fa = fed_avg(&updates).unwrap();
        prop_assert_eq!(fa.len(), 4);
    }
}
