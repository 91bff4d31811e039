use std::collections::BTreeMap;

use fedsel::device::ClientId;
use fedsel::estimator::{
    select_top, ConfidenceState, CostEstimate, LinUcb, Mlp, NeuralConfig, NeuralUcb,
    RegretTracker, TargetScale,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn central_difference(net: &Mlp, x: &[f64], channel: usize, h: f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.param_count())
        .map(|i| {
            let orig = probe.theta()[i];
            probe.theta_mut()[i] = orig + h;
            let up = probe.forward(x).unwrap()[channel];
            probe.theta_mut()[i] = orig - h;
            let down = probe.forward(x).unwrap()[channel];
            probe.theta_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn gradient_matches_finite_differences_on_small_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let d = rng.random_range(2..6);
        let h1 = rng.random_range(3..9);
        let h2 = rng.random_range(2..7);
        let net = Mlp::random(&[d, h1, h2, 2], h1, &mut rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        for channel in 0..2 {
            let exact = net.gradient(&x, channel).unwrap();
            let fd = central_difference(&net, &x, channel, 1e-5);
            assert!(relative_error(&fd, &exact) < 1e-4);
        }
    }
}

fn dense_z(dim: usize, lambda: f64, grads: &[Vec<f64>], m: f64) -> DMatrix<f64> {
    let mut z = DMatrix::<f64>::identity(dim, dim) * lambda;
    for g in grads {
        let v = DVector::from_column_slice(g);
        z += &v * v.transpose() / m;
    }
    z
}

#[test]
fn maintained_inverse_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 12;
    let mut state = ConfidenceState::new(dim, 1.0).unwrap();
    let mut grads = Vec::new();
    for _ in 0..30 {
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        state.update(&g, 8.0).unwrap();
        grads.push(g);
    }
    let z = dense_z(dim, 1.0, &grads, 8.0);
    let inv = DMatrix::from_row_slice(dim, dim, state.z_inverse());
    let prod = &inv * &z;
    let err = (prod - DMatrix::<f64>::identity(dim, dim)).abs().max();
    assert!(err < 1e-8, "{err}");
    assert_eq!(state.update_count(), 30);
}

#[test]
fn bonus_at_identity_is_gradient_norm() {
    let cfg = NeuralConfig::default();
    let est = NeuralUcb::new(4, &cfg, 3).unwrap();
    let x = [0.5, 0.7, 1.0, 0.2];
    let g = est.net().gradient(&x, 0).unwrap();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let m = cfg.hidden[0] as f64;
    let alpha = 0.3;
    let s = est.score(&x, alpha).unwrap();
    let expected = alpha * cfg.scale.batch_time * norm / m.sqrt();
    assert!((s.bonus - expected).abs() < 1e-9 * expected);
    assert_eq!(s.value, s.exploitation + s.bonus);
}

#[test]
fn larger_ridge_gives_smaller_bonus() {
    let x = [0.5, 0.4, 0.0, 0.6];
    let bonus = |lambda: f64| {
        let cfg = NeuralConfig {
            lambda,
            ..Default::default()
        };
        NeuralUcb::new(4, &cfg, 9).unwrap().score(&x, 1.0).unwrap().bonus
    };
    assert!(bonus(4.0) < bonus(1.0));
    assert!(bonus(1.0) < bonus(0.25));
}

#[test]
fn linucb_matches_ridge_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 5;
    let scale = TargetScale::default();
    let mut lin = LinUcb::new(d, 1.0, scale).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..40 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = CostEstimate::new(rng.random_range(100.0..500.0), rng.random_range(0.5..2.0));
        lin.observe(&x, y).unwrap();
        xs.push(x);
        ys.push(y.batch_time / scale.batch_time);
    }
    let xm = DMatrix::from_fn(xs.len(), d, |i, j| xs[i][j]);
    let a = xm.transpose() * &xm + DMatrix::<f64>::identity(d, d);
    let b = xm.transpose() * DVector::from_vec(ys);
    let theta = a.clone().try_inverse().unwrap() * b;
    let got = lin.coefficients(0);
    for (g, t) in got.iter().zip(theta.iter()) {
        assert!((g - t).abs() < 1e-9);
    }
    // duplicate observation halves the variance along a fresh axis
    let mut fresh = LinUcb::new(d, 1.0, scale).unwrap();
    let e0 = [0.0, 0.0, 1.0, 0.0, 0.0];
    fresh.observe(&e0, CostEstimate::new(1.0, 1.0)).unwrap();
    let v1 = fresh.uncertainty(&e0).unwrap().powi(2);
    fresh.observe(&e0, CostEstimate::new(1.0, 1.0)).unwrap();
    let v2 = fresh.uncertainty(&e0).unwrap().powi(2);
    assert!((v1 - 0.5).abs() < 1e-12 && (v2 - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn linucb_learns_linear_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let w_time = [300.0, 150.0, -50.0, 200.0];
    let w_drop = [1.0, 0.5, 0.2, 0.1];
    let mut lin = LinUcb::new(d, 1.0, TargetScale::default()).unwrap();
    let truth = |x: &[f64]| {
        let dot = |w: &[f64; 4]| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        CostEstimate::new(dot(&w_time), dot(&w_drop))
    };
    for _ in 0..5000 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..1.0)).collect();
        lin.observe(&x, truth(&x)).unwrap();
    }
    let probe = [0.5, 0.6, 0.7, 0.8];
    let p = lin.predict(&probe).unwrap();
    let t = truth(&probe);
    assert!((p.batch_time - t.batch_time).abs() < 0.01 * t.batch_time, "{p:?} {t:?}");
    assert!((p.battery_drop - t.battery_drop).abs() < 0.01 * t.battery_drop);
    assert!(lin.uncertainty(&probe).unwrap() < 0.05);
}

#[test]
fn random_choice_regrets_more_than_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<ClientId> = (0..6).map(|i| ClientId::new(format!("c{i}"))).collect();
    let (mut oracle, mut random) = (RegretTracker::default(), RegretTracker::default());
    let none = BTreeMap::new();
    for _ in 0..100 {
        let rewards: BTreeMap<ClientId, f64> = ids
            .iter()
            .map(|id| (id.clone(), -rng.random_range(100.0..500.0)))
            .collect();
        let mut best: Vec<_> = rewards.iter().collect();
        best.sort_by(|a, b| b.1.total_cmp(a.1));
        let best: Vec<ClientId> = best.iter().take(2).map(|(id, _)| (*id).clone()).collect();
        let picks = rand::seq::index::sample(&mut rng, ids.len(), 2);
        let rand_pick: Vec<ClientId> = picks.iter().map(|i| ids[i].clone()).collect();
        assert_eq!(oracle.record(&rewards, &none, &best, 2), 0.0);
        random.record(&rewards, &none, &rand_pick, 2);
    }
    assert!(random.cumulative > oracle.cumulative);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn own_bonus_never_increases(
        seed in any::<u64>(),
        dim in 2usize..20,
        m in 1.0f64..64.0,
        steps in 1usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ConfidenceState::new(dim, rng.random_range(0.1..4.0)).unwrap();
        for _ in 0..steps {
            let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let before = s.quad_form(&g).unwrap();
            s.update(&g, m).unwrap();
            prop_assert!(s.quad_form(&g).unwrap() <= before + 1e-12);
        }
    }

    #[test]
    fn pseudo_regret_is_nonnegative_and_cumulative_monotone(
        rewards in proptest::collection::vec(-1000.0f64..0.0, 2..10),
        picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..5),
        k in 1usize..5,
    ) {
        let ids: Vec<ClientId> = (0..rewards.len()).map(|i| ClientId::new(format!("c{i}"))).collect();
        let map: BTreeMap<ClientId, f64> = ids.iter().cloned().zip(rewards.iter().copied()).collect();
        let mut chosen: Vec<ClientId> = picks.iter().map(|i| ids[i.index(ids.len())].clone()).collect();
        chosen.sort();
        chosen.dedup();
        let mut t = RegretTracker::default();
        let before = t.cumulative;
        let r = t.record(&map, &BTreeMap::new(), &chosen, k);
        prop_assert!(r >= 0.0);
        prop_assert!(t.cumulative >= before);
    }

    #[test]
    fn top_k_is_sorted_prefix(values in proptest::collection::vec(-10i32..10, 1..12), k in 1usize..15) {
        let scores: BTreeMap<ClientId, fedsel::estimator::UcbScore> = values
            .iter()
            .enumerate()
            .map(|(i, v)| (ClientId::new(format!("c{i:02}")), fedsel::estimator::UcbScore::new(f64::from(*v), 0.0)))
            .collect();
        let chosen = select_top(&scores, k);
        prop_assert_eq!(chosen.len(), k.min(values.len()));
        let worst_in = chosen.iter().map(|c| scores[c].value).fold(f64::INFINITY, f64::min);
        for (id, s) in &scores {
            if !chosen.contains(id) {
                prop_assert!(s.value <= worst_in);
            }
        }
    }
}
