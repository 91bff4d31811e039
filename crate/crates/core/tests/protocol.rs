mod common;

use fedsel::orchestrator::{build_parts, run_socket, ExperimentConfig, Simulation};
use fedsel::protocol::net::{ClientOptions, ServerOptions};
use fedsel::protocol::{
    decode_frame, encode_frame, read_frame, write_frame, ContextReport, Directive, ProtocolError, RoundPolicy,
};
use fedsel::selection::{SelectionConfig, SelectionStrategy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn frames_roundtrip(seed in any::<u64>()) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_frame(&msg).unwrap();
        let (back, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert!(back.bit_eq(&msg));
    }

    #[test]
    fn decode_is_total_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
        let _ = decode_frame(&bytes);
    }

    #[test]
    fn decode_is_total_on_corrupted_frames(seed in any::<u64>(), flips in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = encode_frame(&common::random_message(&mut rng)).unwrap();
        for _ in 0..flips {
            let i = rng.random_range(0..bytes.len());
            bytes[i] ^= 1 << rng.random_range(0..8);
        }
        let _ = decode_frame(&bytes);
        let cut = rng.random_range(0..bytes.len());
        prop_assert!(matches!(decode_frame(&bytes[..cut]), Err(_)));
    }
}

#[test]
fn stream_of_frames_reads_back_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let msgs: Vec<_> = (0..50).map(|_| common::random_message(&mut rng)).collect();
    let mut buf = Vec::new();
    for m in &msgs {
        write_frame(&mut buf, m).unwrap();
    }
    let mut cursor = std::io::Cursor::new(buf);
    for m in &msgs {
        assert!(read_frame(&mut cursor).unwrap().bit_eq(m));
    }
    assert!(matches!(read_frame(&mut cursor), Err(ProtocolError::Io(_))));
}

#[test]
fn oversized_length_is_rejected_before_allocation() {
    let bytes = [0xff, 0xff, 0xff, 0xff, 0x01];
    assert!(matches!(decode_frame(&bytes), Err(ProtocolError::TooLarge(_))));
    assert!(matches!(read_frame(&mut &bytes[..]), Err(ProtocolError::TooLarge(_))));
}

fn four_phones(strategy: SelectionStrategy, k: usize) -> ExperimentConfig {
    ExperimentConfig {
        strategy,
        selection: SelectionConfig {
            k,
            ..Default::default()
        },
        rounds: 3,
        ..Default::default()
    }
}

#[test]
fn unselected_clients_do_no_training() {
    let cfg = four_phones(SelectionStrategy::Random, 2);
    let mut sim = Simulation::new(&cfg, 1).unwrap();
    for _ in 0..5 {
        let before: Vec<f64> = sim.nodes().iter().map(|n| n.device().battery()).collect();
        let r = sim.step().unwrap();
        assert_eq!(r.chosen.len(), 2);
        for (node, b) in sim.nodes().iter().zip(before) {
            let rec = r.client(node.id()).unwrap();
            if !r.chosen.contains(node.id()) {
                assert_eq!(sim.coordinator().directive(node.id()), Directive::Wait);
                assert!(node.trace(r.round).unwrap().run.is_none());
                assert_eq!(rec.batches_completed, 0);
                assert_eq!(rec.battery_before, b);
            }
        }
    }
}

#[test]
fn zero_epochs_is_a_session_error() {
    let cfg = four_phones(SelectionStrategy::Random, 2);
    let (coord, mut nodes) = build_parts(&cfg, &cfg.fleet().unwrap(), 0, None).unwrap();
    nodes[0].report(0);
    let battery = nodes[0].device().battery();
    assert!(matches!(nodes[0].train(0, coord.global(), 0), Err(ProtocolError::Session(_))));
    assert_eq!(nodes[0].device().battery(), battery);
}

#[test]
fn local_training_is_deterministic_per_round() {
    let cfg = four_phones(SelectionStrategy::Random, 2);
    let (coord, nodes) = build_parts(&cfg, &cfg.fleet().unwrap(), 4, None).unwrap();
    let run = |round| {
        let mut n = nodes[1].clone();
        n.report(round);
        n.train(round, coord.global(), 2).unwrap().update.unwrap()
    };
    let (a, b) = (run(3), run(3));
    assert!(a.weights.bit_eq(&b.weights));
    assert_eq!(a.meta, b.meta);
    assert!(!run(4).weights.bit_eq(&a.weights));
}

#[test]
fn coordinator_enforces_the_round_phases() {
    let cfg = four_phones(SelectionStrategy::Random, 1);
    let (mut coord, mut nodes) = build_parts(&cfg, &cfg.fleet().unwrap(), 2, None).unwrap();
    coord.begin_round(0);
    for n in &mut nodes {
        assert_eq!(coord.directive(n.id()), Directive::Pending);
        coord.receive_context(&n.id().clone(), n.report(0)).unwrap();
    }
    coord.close_collection().unwrap();
    let late = ContextReport::Unavailable { reason: "late".into() };
    assert!(coord.receive_context(&nodes[0].id().clone(), late).is_err());

    let chosen = coord.plan().unwrap().chosen[0].clone();
    let other = nodes.iter().position(|n| n.id() != &chosen).unwrap();
    let idx = nodes.iter().position(|n| n.id() == &chosen).unwrap();
    let Directive::Selected { epochs } = coord.directive(&chosen) else {
        panic!("chosen client was not selected");
    };
    let good = nodes[idx].train(0, coord.global(), epochs).unwrap().update.unwrap();

    let mut stolen = good.clone();
    assert!(coord.receive_update(&nodes[other].id().clone(), stolen.clone()).is_err());
    stolen.weights.0.pop();
    assert!(coord.receive_update(&chosen, stolen).is_err());
    coord.receive_update(&chosen, good).unwrap();

    let outcome = coord.finalize().unwrap();
    assert_eq!(outcome.accepted, vec![chosen.clone()]);
    assert_eq!(outcome.waiting[&chosen], 0.0);
    assert!(outcome.aggregated.is_some());
    assert!(coord.finalize().is_err());
}

#[test]
fn silent_client_cannot_hold_the_round_forever() {
    let cfg = four_phones(SelectionStrategy::ResourceAware, 2);
    let (mut coord, mut nodes) = build_parts(&cfg, &cfg.fleet().unwrap(), 3, None).unwrap();
    coord.begin_round(0);
    for n in &mut nodes {
        coord.receive_context(&n.id().clone(), n.report(0)).unwrap();
    }
    coord.close_collection().unwrap();
    let plan = coord.plan().unwrap().clone();
    // Only the first chosen client ever uploads.
    let first = nodes.iter_mut().find(|n| n.id() == &plan.chosen[0]).unwrap();
    let epochs = plan.epochs_for(&plan.chosen[0]).unwrap();
    let up = first.train(0, coord.global(), epochs).unwrap().update.unwrap();
    let elapsed = up.meta.elapsed;
    coord.receive_update(&plan.chosen[0], up).unwrap();
    let outcome = coord.finalize().unwrap();
    assert!(!outcome.stalled);
    assert_eq!(outcome.missing, vec![plan.chosen[1].clone()]);
    let deadline = outcome.deadline.unwrap();
    assert!(deadline.is_finite());
    assert_eq!(outcome.round_time, Some(deadline));
    assert_eq!(outcome.waiting[&plan.chosen[0]], deadline - elapsed);
}

#[test]
fn without_a_deadline_a_silent_client_stalls_the_round() {
    let mut cfg = four_phones(SelectionStrategy::ResourceAware, 2);
    cfg.policy = RoundPolicy {
        paper_fidelity: true,
        ..Default::default()
    };
    let (mut coord, mut nodes) = build_parts(&cfg, &cfg.fleet().unwrap(), 3, None).unwrap();
    coord.begin_round(0);
    for n in &mut nodes {
        coord.receive_context(&n.id().clone(), n.report(0)).unwrap();
    }
    coord.close_collection().unwrap();
    assert_eq!(coord.deadline(), None);
    let before = coord.global_flat();
    let outcome = coord.finalize().unwrap();
    assert!(outcome.stalled);
    assert_eq!(outcome.round_time, None);
    assert!(outcome.aggregated.is_none());
    assert!(coord.global_flat().bit_eq(&before));
}

#[test]
fn socket_clients_that_wait_do_not_train() {
    let mut cfg = four_phones(SelectionStrategy::Random, 1);
    cfg.n_clients = Some(3);
    cfg.rounds = 2;
    let (_, reports) = run_socket(&cfg, 5, &ServerOptions::default(), &ClientOptions::default()).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.chosen.len(), 1);
        for c in &r.clients {
            assert_eq!(c.selected, r.chosen.contains(&c.client_id));
            if !c.selected {
                assert_eq!(c.batches_completed, 0);
                assert_eq!(c.duration, None);
            }
        }
    }
}
