use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use pilotsim::engine::{CacheScheme, RunOptions, ScenarioConfig, WorkflowConfig, WorkflowPreset};
use pilotsim::infra::SeCondition;
use pilotsim::matrix::{aggregate_cells, run_matrix_with, ConfigDocument, ExperimentConfig, SeedSpec};
use pilotsim::metrics::{self, MetricsReport, Outcome};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Csv,
    Json,
    Both,
}

/// Run pilot-job workflow scenarios and write plot-ready metrics.
#[derive(Debug, Parser)]
#[command(name = "pilotsim", version)]
struct Args {
    /// Scenario, matrix or manifest JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed count `n` (1..=n), comma list, or range `a..b` / `a..=b`.
    #[arg(long)]
    seeds: Option<SeedSpec>,
    /// Expand over every workflow, SE condition and cache scheme.
    #[arg(long)]
    matrix: bool,
    #[arg(long, value_enum, default_value_t = Emit::Both)]
    emit: Emit,
    /// Bin width of the running-jobs timeseries, in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeseries_resolution: f64,
    /// Also write each run's event log as NDJSON.
    #[arg(long)]
    event_log: bool,
    /// Exit with status 3 if any workflow did not complete.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
    Degraded(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Degraded(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("pilotsim: config error: {m}"),
                Failure::Runtime(m) => eprintln!("pilotsim: runtime error: {m}"),
                Failure::Degraded(m) => eprintln!("pilotsim: degraded: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Reads a scenario, matrix, or a manifest written by an earlier run.
fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(exp) = v.get("experiment") {
        return serde_json::from_value(exp.clone()).map_err(|e| Failure::Config(format!("manifest: {e}")));
    }
    let doc = ConfigDocument::from_json(&text).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(doc.experiment())
}

fn full_axes(exp: &mut ExperimentConfig) {
    exp.workflows = [WorkflowPreset::W1, WorkflowPreset::W2, WorkflowPreset::W3].map(WorkflowConfig::Preset).to_vec();
    exp.se_conditions = (1..=3).map(|i| SeCondition::preset(i, i).expect("preset")).collect();
    exp.cache_schemes = CacheScheme::ALL.to_vec();
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn run(args: &Args) -> Result<(), Failure> {
    if !(args.timeseries_resolution > 0.0 && args.timeseries_resolution.is_finite()) {
        return Err(Failure::Config("--timeseries-resolution must be positive".into()));
    }
    let mut exp = load(&args.config)?;
    if args.matrix {
        full_axes(&mut exp);
    }
    if let Some(SeedSpec(s)) = &args.seeds {
        exp.seeds = Some(s.clone());
    }
    let configs = exp.expand(None).map_err(|e| Failure::Config(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::Config(format!("{}: {e}", args.out.display())))?;
    let ts_dir = args.out.join("timeseries");
    let ev_dir = args.out.join("events");
    if args.emit != Emit::Json {
        fs::create_dir_all(&ts_dir).map_err(|e| Failure::Config(format!("{}: {e}", ts_dir.display())))?;
    }
    if args.event_log {
        fs::create_dir_all(&ev_dir).map_err(|e| Failure::Config(format!("{}: {e}", ev_dir.display())))?;
    }
    // Fail on an unwritable directory before spending time on runs.
    write_manifest(&args.out, &exp, &configs, &[])?;

    eprintln!("pilotsim: {} cells x {} seeds = {} runs", exp.cell_count(), exp.seeds.as_ref().map_or(0, Vec::len), configs.len());
    let opts = RunOptions {
        keep_event_log: args.event_log,
    };
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (cfg, res) in configs.iter().zip(run_matrix_with(&configs, opts)) {
        match res {
            Ok(out) => {
                if let Some(lines) = out.event_log {
                    let p = ev_dir.join(format!("{}.ndjson", out.report.run.run_id));
                    let mut w = create(&p)?;
                    for l in lines {
                        writeln!(w, "{l}").map_err(io(&p))?;
                    }
                    w.flush().map_err(io(&p))?;
                }
                reports.push(out.report);
            }
            Err(e) => errors.push(format!("{} seed {}: {e}", cfg.workflow.label(), cfg.seed)),
        }
    }

    let aggs = aggregate_cells(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
    if args.emit != Emit::Json {
        let p = args.out.join("runs.csv");
        metrics::write_runs_csv(create(&p)?, &reports).map_err(io(&p))?;
        let p = args.out.join("aggregate.csv");
        metrics::write_aggregate_csv(create(&p)?, &aggs).map_err(io(&p))?;
        for r in &reports {
            let p = ts_dir.join(format!("{}.csv", r.run.run_id));
            metrics::write_timeseries_csv(create(&p)?, r, args.timeseries_resolution).map_err(io(&p))?;
        }
    }
    if args.emit != Emit::Csv {
        let p = args.out.join("reports.ndjson");
        let mut w = create(&p)?;
        for r in &reports {
            let line = serde_json::to_string(r).map_err(|e| Failure::Runtime(e.to_string()))?;
            writeln!(w, "{line}").map_err(io(&p))?;
        }
        w.flush().map_err(io(&p))?;
        let p = args.out.join("aggregate.json");
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &aggs).map_err(|e| Failure::Runtime(e.to_string()))?;
        w.flush().map_err(io(&p))?;
    }
    write_manifest(&args.out, &exp, &configs, &reports)?;

    if !errors.is_empty() {
        return Err(Failure::Runtime(errors.join("; ")));
    }
    let degraded: Vec<String> = reports
        .iter()
        .filter(|r| r.outcome != Outcome::Complete)
        .map(|r| format!("{} {:?}{}", r.run.run_id, r.outcome, r.diagnostic.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()))
        .collect();
    for d in &degraded {
        eprintln!("pilotsim: warning: {d}");
    }
    if args.strict && !degraded.is_empty() {
        return Err(Failure::Degraded(format!("{} of {} runs did not complete", degraded.len(), reports.len())));
    }
    eprintln!("pilotsim: wrote {}", args.out.display());
    Ok(())
}

fn write_manifest(out: &Path, exp: &ExperimentConfig, configs: &[ScenarioConfig], reports: &[MetricsReport]) -> Result<(), Failure> {
    let mut cells: Vec<serde_json::Value> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for c in configs {
        let d = c.digest();
        if seen.insert(d.clone()) {
            cells.push(json!({
                "config_digest": d,
                "workflow": c.workflow.label(),
                "se_condition": c.se_condition.label(),
                "scheme": c.cache_scheme.label(),
                "mode": c.submission_mode.to_string(),
            }));
        }
    }
    let runs: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            json!({
                "run_id": r.run.run_id,
                "seed": r.run.seed,
                "config_digest": r.run.config_digest,
                "outcome": r.outcome,
                "event_log_digest": r.event_log_digest,
            })
        })
        .collect();
    let doc = json!({
        "tool": concat!("pilotsim ", env!("CARGO_PKG_VERSION")),
        "seeds": exp.seeds,
        "cells": cells,
        "runs": runs,
        "experiment": exp,
    });
    let p = out.join("manifest.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Failure::Runtime(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(io(&p))
}
