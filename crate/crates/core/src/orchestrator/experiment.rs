use std::collections::BTreeMap;
use std::net::TcpListener;
use std::thread;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, Mode};
use super::report::{build_report, fairness, FairnessReport, RoundReport};
use super::OrchestratorError;
use crate::device::{ClientId, FleetConfig};
use crate::estimator::{EstimatorBank, RegretMode, RegretTracker, TargetScale};
use crate::model::{init_weights, MixtureTask, Samples, SurrogateShape};
use crate::protocol::net::{run_client, serve, ClientOptions, ServerOptions};
use crate::protocol::{ClientNode, Coordinator, Directive, RoundOutcome};
use crate::seeding::derive_seed;

const TEST_STREAM: u64 = 0x7e57;
const INIT_STREAM: u64 = 0x1417;
const BANK_STREAM: u64 = 0xba4c;

/// Server and clients of one seeded run, stepped in-process.
#[derive(Debug, Clone)]
pub struct Simulation {
    seed: u64,
    coord: Coordinator,
    nodes: Vec<ClientNode>,
    regret: RegretTracker,
    scale: TargetScale,
    next_round: usize,
    initial_error: f64,
}

/// Builds the coordinator and client nodes for `cfg` under `seed`.
pub fn build_parts(
    cfg: &ExperimentConfig,
    fleet: &FleetConfig,
    seed: u64,
    bank: Option<EstimatorBank>,
) -> Result<(Coordinator, Vec<ClientNode>), OrchestratorError> {
    let task = MixtureTask::default();
    let nodes = fleet
        .devices
        .iter()
        .map(|p| {
            ClientNode::new(
                p.clone(),
                &task,
                seed,
                cfg.selection.batch_size,
                cfg.learning_rate,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TEST_STREAM]));
    let parts: Vec<Samples> = fleet
        .devices
        .iter()
        .map(|p| task.sample(p.dialect, cfg.test_per_client, &mut rng))
        .collect();
    let test_set = Samples::concat(&parts)?;
    let global = init_weights(SurrogateShape::default(), derive_seed(seed, &[INIT_STREAM]));
    let ids = fleet.ids();
    let bank = match bank {
        Some(b) => Some(b),
        None => cfg
            .strategy
            .estimator()
            .map(|kind| {
                EstimatorBank::new(kind, &ids, &cfg.estimator, derive_seed(seed, &[BANK_STREAM]))
            })
            .transpose()?,
    };
    let coord = Coordinator::new(
        ids,
        cfg.strategy,
        cfg.selection.clone(),
        cfg.aggregation,
        cfg.policy.clone(),
        bank,
        global,
        test_set,
        seed,
    )?;
    Ok((coord, nodes))
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let (coord, nodes) = build_parts(cfg, &cfg.fleet()?, seed, None)?;
        Self::from_parts(coord, nodes, seed, cfg.estimator.neural.scale)
    }

    pub fn from_parts(
        coord: Coordinator,
        nodes: Vec<ClientNode>,
        seed: u64,
        scale: TargetScale,
    ) -> Result<Self, OrchestratorError> {
        let initial_error = coord.global_error()?;
        Ok(Self {
            seed,
            coord,
            nodes,
            regret: RegretTracker::new(RegretMode::Pseudo),
            scale,
            next_round: 0,
            initial_error,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn nodes(&self) -> &[ClientNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [ClientNode] {
        &mut self.nodes
    }

    pub fn node(&self, id: &ClientId) -> Option<&ClientNode> {
        self.nodes.iter().find(|n| n.id() == id)
    }

    /// Global error rate before any round.
    pub fn initial_error(&self) -> f64 {
        self.initial_error
    }

    pub fn regret(&self) -> &RegretTracker {
        &self.regret
    }

    /// Runs one full round in-process.
    pub fn step(&mut self) -> Result<RoundReport, OrchestratorError> {
        let t = self.next_round;
        self.coord.begin_round(t);
        for node in &mut self.nodes {
            let report = node.report(t);
            self.coord.receive_context(&node.id().clone(), report)?;
        }
        self.coord.close_collection()?;
        for node in &mut self.nodes {
            let id = node.id().clone();
            if let Directive::Selected { epochs } = self.coord.directive(&id) {
                let result = node.train(t, self.coord.global(), epochs)?;
                if let Some(update) = result.update {
                    self.coord.receive_update(&id, update)?;
                }
            }
        }
        let outcome = self.coord.finalize()?;
        let report = self.report(&outcome);
        for node in &mut self.nodes {
            node.end_round();
        }
        self.next_round += 1;
        Ok(report)
    }

    fn report(&mut self, outcome: &RoundOutcome) -> RoundReport {
        let bs = self.coord.selection_config().batch_size;
        build_report(
            self.seed,
            outcome,
            &self.nodes,
            |n| n.dataset().n_train() / bs,
            &mut self.regret,
            self.coord.selection_config().k,
            &self.scale,
        )
    }

    /// Runs up to `rounds` rounds, stopping early after a stalled one.
    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundReport>, OrchestratorError> {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let r = self.step()?;
            let stalled = r.stalled;
            out.push(r);
            if stalled {
                info!("seed {}: round {} stalled", self.seed, out.len() - 1);
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub initial_error: f64,
    pub reports: Vec<RoundReport>,
    pub fairness: FairnessReport,
}

impl SeedRun {
    pub fn final_error(&self) -> f64 {
        self.reports
            .last()
            .map_or(self.initial_error, |r| r.global_error)
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.cumulative_regret)
    }

    /// Mean MSE over the last `window` rounds that have one.
    pub fn final_mse(&self, window: usize) -> Option<f64> {
        let tail: Vec<f64> = self.reports.iter().rev().filter_map(|r| r.mse).take(window).collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }

    pub fn mean_max_waiting(&self, from_round: usize) -> f64 {
        let w: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.round >= from_round)
            .map(|r| r.max_waiting)
            .collect();
        if w.is_empty() {
            0.0
        } else {
            w.iter().sum::<f64>() / w.len() as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    fn mean(&self, f: impl Fn(&SeedRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_final_error(&self) -> f64 {
        self.mean(SeedRun::final_error)
    }

    pub fn mean_initial_error(&self) -> f64 {
        self.mean(|r| r.initial_error)
    }

    pub fn mean_cumulative_regret(&self) -> f64 {
        self.mean(SeedRun::cumulative_regret)
    }

    pub fn mean_final_mse(&self) -> f64 {
        let w = self.config.mse_window;
        self.mean(|r| r.final_mse(w).unwrap_or(f64::NAN))
    }
}

/// Runs one seed in the configured mode.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, OrchestratorError> {
    let fleet = cfg.fleet()?;
    let (initial_error, reports) = match cfg.mode {
        Mode::InProcess => {
            let mut sim = Simulation::new(cfg, seed)?;
            let reports = sim.run(cfg.rounds)?;
            (sim.initial_error(), reports)
        }
        Mode::Socket => run_socket(cfg, seed, &ServerOptions::default(), &ClientOptions::default())?,
    };
    Ok(SeedRun {
        seed,
        initial_error,
        fairness: fairness(seed, &fleet.ids(), &reports),
        reports,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, OrchestratorError> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        runs,
    })
}

/// Same run as [`Simulation`], but every client talks to the server over a
/// localhost socket from its own thread.
pub fn run_socket(
    cfg: &ExperimentConfig,
    seed: u64,
    server: &ServerOptions,
    client: &ClientOptions,
) -> Result<(f64, Vec<RoundReport>), OrchestratorError> {
    cfg.validate()?;
    let (coord, nodes) = build_parts(cfg, &cfg.fleet()?, seed, None)?;
    let initial_error = coord.global_error()?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| OrchestratorError::Io(e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| OrchestratorError::Io(e.to_string()))?;
    let handles: Vec<_> = nodes
        .into_iter()
        .map(|node| {
            let opts = client.clone();
            thread::spawn(move || run_client(addr, node, &opts))
        })
        .collect();
    let opts = ServerOptions {
        rounds: cfg.rounds,
        ..server.clone()
    };
    let served = serve(listener, coord, &opts);
    let mut nodes = Vec::new();
    for h in handles {
        let (_, node) = h
            .join()
            .map_err(|_| OrchestratorError::Io("client thread panicked".into()))??;
        nodes.push(node);
    }
    let (outcomes, coord) = served?;
    nodes.sort_by(|a, b| a.id().cmp(b.id()));
    let mut regret = RegretTracker::new(RegretMode::Pseudo);
    let bs = cfg.selection.batch_size;
    let reports = outcomes
        .iter()
        .map(|o| {
            build_report(
                seed,
                o,
                &nodes,
                |n| n.dataset().n_train() / bs,
                &mut regret,
                coord.selection_config().k,
                &cfg.estimator.neural.scale,
            )
        })
        .collect();
    Ok((initial_error, reports))
}

/// Seed-averaged per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub n_seeds: usize,
    pub regret: f64,
    pub cumulative_regret: f64,
    pub mse: Option<f64>,
    pub global_error: f64,
    pub max_waiting: f64,
    pub total_waiting: f64,
}

pub fn summarise(runs: &[SeedRun]) -> Vec<RoundSummary> {
    let mut by_round: BTreeMap<usize, Vec<&RoundReport>> = BTreeMap::new();
    for run in runs {
        for r in &run.reports {
            by_round.entry(r.round).or_default().push(r);
        }
    }
    by_round
        .into_iter()
        .map(|(round, rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RoundReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let mses: Vec<f64> = rs.iter().filter_map(|r| r.mse).collect();
            RoundSummary {
                round,
                n_seeds: rs.len(),
                regret: mean(&|r| r.regret),
                cumulative_regret: mean(&|r| r.cumulative_regret),
                mse: (!mses.is_empty()).then(|| mses.iter().sum::<f64>() / mses.len() as f64),
                global_error: mean(&|r| r.global_error),
                max_waiting: mean(&|r| r.max_waiting),
                total_waiting: mean(&|r| r.total_waiting),
            }
        })
        .collect()
}
