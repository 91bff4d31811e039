use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use fedsel::device::DeviceProfile;
use fedsel::model::MixtureTask;
use fedsel::orchestrator::{
    bandit_bench, build_parts, export::write_rounds, export_all, fmt_sig6, report::build_report,
    run_experiment, scenario_table2, ExperimentConfig,
};
use fedsel::estimator::{RegretMode, RegretTracker};
use fedsel::protocol::net::{run_client, serve, ClientOptions, ServerOptions};
use fedsel::protocol::ClientNode;
use fedsel::selection::SelectionStrategy;

#[derive(Parser)]
#[command(name = "fedsel", version, about = "Federated learning with resource-aware client selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment in-process (or over localhost sockets if the config says so).
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Serve rounds to remote clients.
    Server {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Wall seconds per simulated second while waiting for uploads.
        #[arg(long, default_value_t = 1e-4)]
        time_scale: f64,
    },
    /// Join a server as one simulated device.
    Client {
        #[arg(long, default_value = "127.0.0.1:7878")]
        server: SocketAddr,
        /// Device profile JSON.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f32,
    },
    /// One round of a built-in two-client scenario with frozen estimates.
    Scenario {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        id: u8,
        #[arg(long, default_value = "resource_aware")]
        strategy: SelectionStrategy,
        /// Disable the round deadline.
        #[arg(long)]
        paper_fidelity: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare the bandit estimators on the four-phone fleet.
    BanditBench {
        #[arg(long, default_value_t = 475)]
        rounds: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// First seed; the run uses `seed..seed+seeds`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/bandit-bench")]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let result = run_experiment(&cfg)?;
    for path in export_all(&result, out_dir)? {
        println!("wrote {}", path.display());
    }
    println!(
        "mean final error {} | mean cumulative regret {} | mean final mse {}",
        fmt_sig6(result.mean_final_error()),
        fmt_sig6(result.mean_cumulative_regret()),
        fmt_sig6(result.mean_final_mse())
    );
    Ok(())
}

fn server(
    listen: SocketAddr,
    config: Option<&Path>,
    seed: Option<u64>,
    out_dir: &Path,
    time_scale: f64,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let seed = cfg.seeds[0];
    let (coord, _) = build_parts(&cfg, &cfg.fleet()?, seed, None)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    info!("listening on {listen} for {} clients", coord.clients().len());
    let opts = ServerOptions {
        rounds: cfg.rounds,
        time_scale,
        report_timeout: Duration::from_secs(600),
        ..Default::default()
    };
    let (outcomes, _) = serve(listener, coord, &opts)?;
    // The server never sees device ground truth, so client rows stay empty.
    let mut regret = RegretTracker::new(RegretMode::Pseudo);
    let reports: Vec<_> = outcomes
        .iter()
        .map(|o| {
            build_report(seed, o, &[], |_| 1, &mut regret, cfg.selection.k, &cfg.estimator.neural.scale)
        })
        .collect();
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("rounds.csv");
    write_rounds(fs::File::create(&path)?, &reports)?;
    println!("wrote {}", path.display());
    let path = out_dir.join("outcomes.json");
    fs::write(&path, serde_json::to_string_pretty(&outcomes)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn client(server: SocketAddr, profile: &Path, seed: u64, batch_size: usize, lr: f32) -> Result<()> {
    let text = fs::read_to_string(profile).with_context(|| format!("reading {}", profile.display()))?;
    let profile: DeviceProfile = serde_json::from_str(&text)?;
    let node = ClientNode::new(profile, &MixtureTask::default(), seed, batch_size, lr)?;
    let (log, node) = run_client(server, node, &ClientOptions::default())?;
    let trained = log.iter().filter(|r| r.uploaded).count();
    println!(
        "{}: {} rounds, {} uploads, battery {}",
        node.id(),
        log.len(),
        trained,
        fmt_sig6(node.device().battery())
    );
    Ok(())
}

fn scenario(id: u8, strategy: SelectionStrategy, paper_fidelity: bool, seed: u64, out_dir: Option<&Path>) -> Result<()> {
    let rec = scenario_table2(id, strategy, paper_fidelity, seed)?;
    println!("scenario {id} / {strategy}{}", if paper_fidelity { " (no deadline)" } else { "" });
    println!("client      AC     BS  b_hat     d_hat  b_max  e_max_t  epochs  actual_b  battery_after");
    for row in &rec.audit {
        let c = rec.clients.iter().find(|c| c.id == row.client);
        println!(
            "{:<10} {:>5} {:>3} {:>8} {:>6} {:>6} {:>8} {:>7} {:>9} {:>14}",
            row.client.as_str(),
            fmt_sig6(row.battery),
            row.charging,
            fmt_sig6(row.batch_time_hat),
            fmt_sig6(row.battery_drop_hat),
            row.b_max.map_or("-".into(), |b| b.to_string()),
            row.e_max_t,
            row.epochs.map_or("-".into(), |e| e.to_string()),
            c.map_or("-".into(), |c| fmt_sig6(c.actual_batch_time)),
            rec.battery_after.get(&row.client).map_or("-".into(), |b| fmt_sig6(*b)),
        );
    }
    match rec.time_budget_min {
        Some(m) => println!("m_t = {} min", fmt_sig6(m)),
        None => println!("m_t = none"),
    }
    match rec.waiting_min {
        Some(w) => println!("waiting time = {} min", fmt_sig6(w)),
        None => println!("round never completed (died: {:?})", rec.died),
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("scenario-{id}-{strategy}.json"));
        fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn bench(rounds: usize, n_seeds: u64, seed: u64, out_dir: &Path) -> Result<()> {
    if n_seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seeds: Vec<u64> = (seed..seed + n_seeds).collect();
    let rows = bandit_bench(rounds, &seeds)?;
    println!("strategy        final_mse    cumulative_regret");
    for (row, result) in &rows {
        println!(
            "{:<14} {:>10} {:>20}",
            row.strategy.name(),
            fmt_sig6(row.mean_final_mse),
            fmt_sig6(row.mean_cumulative_regret)
        );
        export_all(result, &out_dir.join(row.strategy.name()))?;
    }
    let summary: Vec<_> = rows.iter().map(|(r, _)| r).collect();
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("bench.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate {
            config,
            seed,
            out_dir,
        } => simulate(config.as_deref(), seed, &out_dir),
        Command::Server {
            listen,
            config,
            seed,
            out_dir,
            time_scale,
        } => server(listen, config.as_deref(), seed, &out_dir, time_scale),
        Command::Client {
            server,
            profile,
            seed,
            batch_size,
            learning_rate,
        } => client(server, &profile, seed, batch_size, learning_rate),
        Command::Scenario {
            id,
            strategy,
            paper_fidelity,
            seed,
            out_dir,
        } => scenario(id, strategy, paper_fidelity, seed, out_dir.as_deref()),
        Command::BanditBench {
            rounds,
            seeds,
            seed,
            out_dir,
        } => bench(rounds, seeds, seed, &out_dir),
    }
}
