//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! if anything failed. Runs without the libtest harness so every line is
//! printed even when all criteria pass.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedsel::aggregation::{softmax_coefficients, wer_weighted_aggregate, ClientUpdate};
use fedsel::device::ClientId;
use fedsel::estimator::{ConfidenceState, Mlp};
use fedsel::model::{describe_weights, flatten_weights, load_flat_weights, FlatWeights};
use fedsel::orchestrator::{
    bandit_bench, convergence_config, run_experiment, run_socket, scenario_table2, waiting_config, ExperimentConfig,
    Simulation,
};
use fedsel::protocol::net::{ClientOptions, ServerOptions};
use fedsel::protocol::{decode_frame, encode_frame};
use fedsel::selection::{SelectionConfig, SelectionStrategy};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn id(s: &str) -> ClientId {
    ClientId::new(s)
}

fn scenario1_resource_aware() -> Outcome {
    let rec = scenario_table2(1, SelectionStrategy::ResourceAware, false, 0).map_err(|e| e.to_string())?;
    let epochs = (rec.epochs.get(&id("client-1")).copied(), rec.epochs.get(&id("client-2")).copied());
    let budget = rec.time_budget_min.unwrap_or(f64::NAN);
    let wait = rec.waiting_min.unwrap_or(f64::NAN);
    check(
        epochs == (Some(4), Some(7)) && (budget - 146.56).abs() <= 0.05 && (wait - 7.42).abs() <= 0.02,
        format!("epochs {epochs:?}, budget {budget:.4} min, waiting {wait:.4} min"),
    )
}

fn scenario1_random() -> Outcome {
    let rec = scenario_table2(1, SelectionStrategy::Random, false, 0).map_err(|e| e.to_string())?;
    let epochs: Vec<usize> = rec.epochs.values().copied().collect();
    let wait = rec.waiting_min.unwrap_or(f64::NAN);
    check(
        epochs == [7, 7] && (wait - 114.92).abs() <= 0.02,
        format!("epochs {epochs:?}, waiting {wait:.4} min"),
    )
}

fn scenario2_resource_aware() -> Outcome {
    let rec = scenario_table2(2, SelectionStrategy::ResourceAware, false, 0).map_err(|e| e.to_string())?;
    let cfg = SelectionConfig::default();
    let e1 = rec.epochs.get(&id("client-1")).copied();
    let e2 = rec.epochs.get(&id("client-2")).copied();
    let budget_s = rec.time_budget_min.unwrap_or(f64::NAN) * 60.0;
    // Client 2 fills the budget set by client 1 with whole epochs.
    let plan = rec.report.outcome.as_ref().and_then(|o| o.plan.as_ref()).ok_or("no plan")?;
    let c2 = plan
        .assessments
        .iter()
        .find(|a| a.client_id == id("client-2"))
        .ok_or("client-2 not assessed")?;
    let per_epoch = c2.estimate.batch_time * cfg.batches_per_epoch(c2.n_samples);
    let expected_e2 = ((budget_s / per_epoch).floor() as usize).clamp(cfg.e_min, cfg.e_max);
    let battery1 = rec.battery_after[&id("client-1")];
    let wait = rec.waiting_min.unwrap_or(f64::INFINITY);
    check(
        e1 == Some(3)
            && e2 == Some(expected_e2)
            && battery1 >= cfg.battery_floor
            && rec.completed
            && wait.is_finite()
            && wait <= 15.0,
        format!(
            "epochs ({e1:?}, {e2:?}) vs formula {expected_e2}, client-1 battery {battery1:.3}, waiting {wait:.4} min"
        ),
    )
}

fn scenario2_random_stalls() -> Outcome {
    let rec = scenario_table2(2, SelectionStrategy::Random, true, 0).map_err(|e| e.to_string())?;
    let battery1 = rec.battery_after[&id("client-1")];
    check(
        battery1 == 0.0 && rec.died.contains(&id("client-1")) && !rec.completed && rec.waiting_min.is_none(),
        format!(
            "client-1 battery {battery1}, died {:?}, completed {}",
            rec.died, rec.completed
        ),
    )
}

fn update(name: &str, w: f32, wer: f64) -> ClientUpdate {
    ClientUpdate {
        client_id: id(name),
        weights: FlatWeights(vec![w]),
        wer,
        n_samples: 25,
        batch_time: 200.0,
        battery_drop: 1.0,
    }
}

fn aggregation_oracle() -> Outcome {
    let out = wer_weighted_aggregate(&[update("a", 1.0, 0.2), update("b", 0.0, 0.8)]).map_err(|e| e.to_string())?;
    // Softmax over accuracies 0.8 and 0.2, written out by hand.
    let (ea, eb) = (0.8f64.exp(), 0.2f64.exp());
    let oracle = ea / (ea + eb);
    let got = f64::from(out.0[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(617);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let wers: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let c = softmax_coefficients(&wers).map_err(|e| e.to_string())?;
        worst = worst.max((c.iter().sum::<f64>() - 1.0).abs());
    }
    check(
        (got - 0.64566).abs() <= 1e-4 && (got - oracle).abs() <= 1e-4 && worst <= 1e-9,
        format!("aggregate {got:.6} vs hand {oracle:.6}, worst coefficient-sum error {worst:.2e}"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(618);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = [4, 6][rng.random_range(0..2)];
        let h1 = rng.random_range(4..40);
        let h2 = rng.random_range(2..20);
        let net = Mlp::random(&[d, h1, h2, 2], h1, &mut rng).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        for channel in 0..2 {
            let exact = net.gradient(&x, channel).map_err(|e| e.to_string())?;
            let mut probe = net.clone();
            let h = 1e-6;
            let fd: Vec<f64> = (0..net.param_count())
                .map(|i| {
                    let orig = probe.theta()[i];
                    probe.theta_mut()[i] = orig + h;
                    let up = probe.forward(&x).unwrap()[channel];
                    probe.theta_mut()[i] = orig - h;
                    let down = probe.forward(&x).unwrap()[channel];
                    probe.theta_mut()[i] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let diff = fd.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
        }
    }
    check(worst <= 1e-3, format!("worst relative error {worst:.2e}"))
}

fn confidence_inverse() -> Outcome {
    let dim = 800;
    let m = 32.0;
    let mut rng = ChaCha8Rng::seed_from_u64(619);
    let mut state = ConfidenceState::new(dim, 1.0).map_err(|e| e.to_string())?;
    let mut z = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..200 {
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        state.update(&g, m).map_err(|e| e.to_string())?;
        let v = DVector::from_column_slice(&g);
        z += &v * v.transpose() / m;
    }
    let inv = DMatrix::from_row_slice(dim, dim, state.z_inverse());
    let err = (inv * z - DMatrix::<f64>::identity(dim, dim)).abs().max();
    check(err <= 1e-6, format!("dimension {dim}, max-abs deviation {err:.2e}"))
}

fn bandit_ordering() -> Outcome {
    let rows = bandit_bench(475, &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let by = |s: SelectionStrategy| -> Result<(f64, f64), String> {
        rows.iter()
            .find(|(r, _)| r.strategy == s)
            .map(|(r, _)| (r.mean_final_mse, r.mean_cumulative_regret))
            .ok_or_else(|| format!("{s} missing from the bench"))
    };
    let (lin, shared, per) = (
        by(SelectionStrategy::LinUcb)?,
        by(SelectionStrategy::NeuralUcbShared)?,
        by(SelectionStrategy::NeuralUcbPerClient)?,
    );
    check(
        lin.0 > shared.0 && shared.0 >= per.0 && per.1 < lin.1 && per.1 < shared.1,
        format!(
            "mse linucb {:.4} / shared {:.4} / per-client {:.4}; regret {:.1} / {:.1} / {:.1}",
            lin.0, shared.0, per.0, lin.1, shared.1, per.1
        ),
    )
}

fn waiting_dominance() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let mean_wait = |strategy| -> Result<f64, String> {
        let res = run_experiment(&waiting_config(strategy, 100, 50, seeds.clone())).map_err(|e| e.to_string())?;
        Ok(res.runs.iter().map(|r| r.mean_max_waiting(100)).sum::<f64>() / res.runs.len() as f64)
    };
    let random = mean_wait(SelectionStrategy::Random)?;
    let aware = mean_wait(SelectionStrategy::ResourceAware)?;
    let ratio = aware / random;
    check(
        ratio <= 0.25,
        format!("resource_aware {aware:.1} s, random {random:.1} s, ratio {:.2}%", 100.0 * ratio),
    )
}

fn convergence_trend() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let mut finals = BTreeMap::new();
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [3, 4, 5] {
        let res = run_experiment(&convergence_config(k, 5, seeds.clone())).map_err(|e| e.to_string())?;
        let (start, end) = (res.mean_initial_error(), res.mean_final_error());
        ok &= end < start;
        finals.insert(k, end);
        parts.push(format!("k{k} {start:.4} -> {end:.4}"));
    }
    ok &= finals[&5] <= finals[&3];
    check(ok, parts.join(", "))
}

fn dual_mode() -> Outcome {
    let cfg = ExperimentConfig {
        n_clients: Some(2),
        rounds: 3,
        seeds: vec![7],
        ..Default::default()
    };
    let local = Simulation::new(&cfg, 7)
        .and_then(|mut s| s.run(3))
        .map_err(|e| e.to_string())?;
    let (_, remote) =
        run_socket(&cfg, 7, &ServerOptions::default(), &ClientOptions::default()).map_err(|e| e.to_string())?;
    if local.len() != remote.len() {
        return Err(format!("{} local rounds, {} socket rounds", local.len(), remote.len()));
    }
    let mut aggregated = 0;
    for (a, b) in local.iter().zip(&remote) {
        let (oa, ob) = (a.outcome.as_ref(), b.outcome.as_ref());
        let plan_a = oa.and_then(|o| o.plan.as_ref());
        let plan_b = ob.and_then(|o| o.plan.as_ref());
        if plan_a != plan_b {
            return Err(format!("round {}: plans differ", a.round));
        }
        match (oa.and_then(|o| o.aggregated.as_ref()), ob.and_then(|o| o.aggregated.as_ref())) {
            (Some(x), Some(y)) if x.bit_eq(y) => aggregated += 1,
            (None, None) => {}
            _ => return Err(format!("round {}: aggregated weights differ", a.round)),
        }
    }
    check(
        aggregated > 0,
        format!("{} rounds, {aggregated} aggregated, plans and weights identical", local.len()),
    )
}

fn roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(624);
    for i in 0..1000 {
        let w = common::random_model(&mut rng);
        let flat = flatten_weights(&w).map_err(|e| e.to_string())?;
        let back = load_flat_weights(&flat, &describe_weights(&w)).map_err(|e| e.to_string())?;
        if !back.bit_eq(&w) {
            return Err(format!("model {i} changed in the roundtrip"));
        }
    }
    for i in 0..100_000 {
        let msg = common::random_message(&mut rng);
        let bytes = encode_frame(&msg).map_err(|e| e.to_string())?;
        match decode_frame(&bytes) {
            Ok((back, used)) if used == bytes.len() && back.bit_eq(&msg) => {}
            _ => return Err(format!("message {i} changed in the roundtrip")),
        }
    }
    let mut accepted = 0;
    for i in 0..100_000 {
        let bytes = common::fuzz_bytes(&mut rng);
        match catch_unwind(|| decode_frame(&bytes).is_ok()) {
            Ok(ok) => accepted += usize::from(ok),
            Err(_) => return Err(format!("decoder panicked on fuzz input {i}")),
        }
    }
    Ok(format!(
        "1000 models, 100000 messages, 100000 fuzzed inputs ({accepted} decoded as frames)"
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() -> ExitCode {
    // Keep the default hook quiet; panics are reported as FAIL lines.
    std::panic::set_hook(Box::new(|_| {}));
    let criteria = [
        Criterion { name: "scenario 1 resource_aware epochs, budget and waiting", budget: secs(1), run: scenario1_resource_aware },
        Criterion { name: "scenario 1 random waiting", budget: secs(1), run: scenario1_random },
        Criterion { name: "scenario 2 resource_aware battery-safe formula plan", budget: secs(1), run: scenario2_resource_aware },
        Criterion { name: "scenario 2 random without deadline never completes", budget: secs(5), run: scenario2_random_stalls },
        Criterion { name: "aggregation oracle and coefficient sums", budget: secs(60), run: aggregation_oracle },
        Criterion { name: "mlp gradient vs central differences", budget: secs(5), run: gradient_check },
        Criterion { name: "maintained inverse vs dense confidence matrix", budget: secs(10), run: confidence_inverse },
        Criterion { name: "bandit mse and regret ordering", budget: secs(600), run: bandit_ordering },
        Criterion { name: "resource_aware waiting at most 25% of random", budget: secs(120), run: waiting_dominance },
        Criterion { name: "global error falls and k=5 beats k=3", budget: secs(60), run: convergence_trend },
        Criterion { name: "socket and in-process runs agree", budget: secs(30), run: dual_mode },
        Criterion { name: "weight, frame and fuzz roundtrips", budget: secs(600), run: roundtrips },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let (verdict, detail) = match result {
            Ok(d) if took <= c.budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => ("FAIL", d),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {} ({:.2}s): {detail}", c.name, took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
