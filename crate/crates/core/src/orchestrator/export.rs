//! CSV and JSON output. Column orders are fixed by the `*_HEADER` constants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiment::{summarise, ExperimentResult, RoundSummary};
use super::report::{FairnessReport, RoundReport};
use super::OrchestratorError;

pub const ROUNDS_HEADER: [&str; 17] = [
    "seed",
    "round",
    "warmup",
    "skipped",
    "stalled",
    "status",
    "chosen",
    "time_budget",
    "deadline",
    "round_time",
    "max_waiting",
    "total_waiting",
    "regret",
    "cumulative_regret",
    "mse",
    "mse_all",
    "global_error",
];

pub const CLIENTS_HEADER: [&str; 26] = [
    "seed",
    "round",
    "client",
    "selected",
    "TR",
    "AR",
    "AC",
    "BS",
    "CI",
    "PI",
    "predicted_batch_time",
    "predicted_battery_drop",
    "ucb",
    "true_batch_time",
    "true_battery_drop",
    "observed_batch_time",
    "observed_battery_drop",
    "epochs_assigned",
    "epochs_completed",
    "batches_completed",
    "died",
    "battery_before",
    "battery_after",
    "duration",
    "waiting",
    "accepted",
];

pub const SUMMARY_HEADER: [&str; 8] = [
    "round",
    "n_seeds",
    "regret",
    "cumulative_regret",
    "mse",
    "global_error",
    "max_waiting",
    "total_waiting",
];

pub const FAIRNESS_HEADER: [&str; 4] = ["seed", "client", "selections", "jain_index"];

/// Six significant digits, `%g` style: plain notation for exponents in
/// `[-4, 6)`, scientific otherwise, trailing zeros dropped.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s.to_owned()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig6).unwrap_or_default()
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

fn csv_err(e: csv::Error) -> OrchestratorError {
    OrchestratorError::Io(e.to_string())
}

fn writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>, OrchestratorError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    Ok(out)
}

pub fn write_rounds<W: Write>(w: W, reports: &[RoundReport]) -> Result<(), OrchestratorError> {
    let mut out = writer(w, &ROUNDS_HEADER)?;
    for r in reports {
        let chosen: Vec<&str> = r.chosen.iter().map(|c| c.as_str()).collect();
        out.write_record([
            r.seed.to_string(),
            r.round.to_string(),
            flag(r.warmup),
            flag(r.skipped),
            flag(r.stalled),
            serde_json::to_value(r.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            chosen.join(";"),
            opt(r.time_budget),
            opt(r.deadline),
            opt(r.round_time),
            fmt_sig6(r.max_waiting),
            fmt_sig6(r.total_waiting),
            fmt_sig6(r.regret),
            fmt_sig6(r.cumulative_regret),
            opt(r.mse),
            opt(r.mse_all),
            fmt_sig6(r.global_error),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_clients<W: Write>(w: W, reports: &[RoundReport]) -> Result<(), OrchestratorError> {
    let mut out = writer(w, &CLIENTS_HEADER)?;
    for r in reports {
        for c in &r.clients {
            let ctx = c.context;
            out.write_record([
                r.seed.to_string(),
                r.round.to_string(),
                c.client_id.to_string(),
                flag(c.selected),
                opt(ctx.map(|x| x.total_ram)),
                opt(ctx.map(|x| x.available_ram)),
                opt(ctx.map(|x| x.battery)),
                opt(ctx.map(|x| x.battery_status.as_f64())),
                opt(ctx.map(|x| x.cpu_usage)),
                opt(ctx.map(|x| x.perf_index)),
                opt(c.predicted.map(|p| p.batch_time)),
                opt(c.predicted.map(|p| p.battery_drop)),
                opt(c.ucb),
                opt(c.true_batch_time),
                opt(c.true_battery_drop),
                opt(c.observed_batch_time),
                opt(c.observed_battery_drop),
                c.epochs_assigned.to_string(),
                c.epochs_completed.to_string(),
                c.batches_completed.to_string(),
                flag(c.died),
                fmt_sig6(c.battery_before),
                fmt_sig6(c.battery_after),
                opt(c.duration),
                opt(c.waiting),
                flag(c.accepted),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, rows: &[RoundSummary]) -> Result<(), OrchestratorError> {
    let mut out = writer(w, &SUMMARY_HEADER)?;
    for s in rows {
        out.write_record([
            s.round.to_string(),
            s.n_seeds.to_string(),
            fmt_sig6(s.regret),
            fmt_sig6(s.cumulative_regret),
            opt(s.mse),
            fmt_sig6(s.global_error),
            fmt_sig6(s.max_waiting),
            fmt_sig6(s.total_waiting),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_fairness<W: Write>(w: W, reports: &[FairnessReport]) -> Result<(), OrchestratorError> {
    let mut out = writer(w, &FAIRNESS_HEADER)?;
    for f in reports {
        for (id, n) in &f.selections {
            out.write_record([
                f.seed.to_string(),
                id.to_string(),
                n.to_string(),
                fmt_sig6(f.jain_index),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeedHeadline {
    seed: u64,
    rounds: usize,
    initial_error: f64,
    final_error: f64,
    cumulative_regret: f64,
    final_mse: Option<f64>,
    mean_max_waiting: f64,
    jain_index: f64,
    stalled: bool,
}

#[derive(Debug, Serialize)]
struct SummaryJson<'a> {
    config: &'a super::ExperimentConfig,
    seeds: Vec<SeedHeadline>,
    mean_final_error: f64,
    mean_cumulative_regret: f64,
    mean_final_mse: f64,
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File), OrchestratorError> {
    let path = dir.join(name);
    let file = fs::File::create(&path)
        .map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
    Ok((path, file))
}

/// Writes rounds.csv, clients.csv, summary.csv, fairness.csv and
/// summary.json into `dir`; returns the paths written.
pub fn export_all(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>, OrchestratorError> {
    fs::create_dir_all(dir).map_err(|e| OrchestratorError::Io(format!("{}: {e}", dir.display())))?;
    let reports: Vec<RoundReport> = result.runs.iter().flat_map(|r| r.reports.clone()).collect();
    let mut paths = Vec::new();

    let (p, f) = create(dir, "rounds.csv")?;
    write_rounds(f, &reports)?;
    paths.push(p);
    let (p, f) = create(dir, "clients.csv")?;
    write_clients(f, &reports)?;
    paths.push(p);
    let (p, f) = create(dir, "summary.csv")?;
    write_summary(f, &summarise(&result.runs))?;
    paths.push(p);
    let (p, f) = create(dir, "fairness.csv")?;
    let fair: Vec<FairnessReport> = result.runs.iter().map(|r| r.fairness.clone()).collect();
    write_fairness(f, &fair)?;
    paths.push(p);

    let window = result.config.mse_window;
    let summary = SummaryJson {
        config: &result.config,
        seeds: result
            .runs
            .iter()
            .map(|r| SeedHeadline {
                seed: r.seed,
                rounds: r.reports.len(),
                initial_error: r.initial_error,
                final_error: r.final_error(),
                cumulative_regret: r.cumulative_regret(),
                final_mse: r.final_mse(window),
                mean_max_waiting: r.mean_max_waiting(0),
                jain_index: r.fairness.jain_index,
                stalled: r.reports.iter().any(|x| x.stalled),
            })
            .collect(),
        mean_final_error: result.mean_final_error(),
        mean_cumulative_regret: result.mean_cumulative_regret(),
        mean_final_mse: result.mean_final_mse(),
    };
    let (p, mut f) = create(dir, "summary.json")?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| OrchestratorError::Io(e.to_string()))?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    paths.push(p);
    Ok(paths)
}
