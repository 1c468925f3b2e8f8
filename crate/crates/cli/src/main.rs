//! `vflsim`: runs VFL experiments, sweeps and PD-matrix diagnostics from JSON configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use vfl_core::harness::{
    append_metrics, emit_pd_matrix, run_repeats, run_sweep, write_json, write_pd_matrix, write_summary,
    ExperimentConfig, Grid, MetricsRow, RunOutcome,
};

#[derive(Parser)]
#[command(name = "vflsim", version, about = "Vertical federated learning attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    config: PathBuf,
    /// Override a config key by dotted path, e.g. `defense.sigma=0.05`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config for its configured repeats.
    Run(Common),
    /// Run every point of a grid for N repeats.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// JSON object mapping dotted config paths to value lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Label-recovery PD matrix against a CoAE-defended run.
    Pdmatrix(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config, &common.set)?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn reports(outcomes: &[RunOutcome]) -> Vec<Value> {
    outcomes
        .iter()
        .filter_map(|o| o.coae_report.as_ref().map(|r| json!({"seed": o.seed, "report": r})))
        .collect()
}

fn manifest(command: &str, cfg: &ExperimentConfig, seeds: &[u64], extra: Value) -> Value {
    let mut m = json!({
        "tool": "vflsim",
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": vfl_core::harness::SCHEMA_VERSION,
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg,
        "seeds": seeds,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
        m.extend(e);
    }
    m
}

fn print_final(rows: &[&MetricsRow]) {
    for r in rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "seed {:>4}  main {}  backdoor {}  recovery {}  d_final {}",
            r.seed,
            f(r.main_accuracy),
            f(r.backdoor_accuracy),
            f(r.label_recovery_rate),
            f(r.d_final)
        );
    }
}

fn run(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let outcomes = run_repeats(&cfg)?;
    let rows: Vec<MetricsRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    append_metrics(&common.out.join("metrics.csv"), &rows)?;
    let seeds: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
    let targets: Vec<usize> = outcomes.iter().map(|o| o.target_label).collect();
    write_json(
        &common.out.join("manifest.json"),
        &manifest("run", &cfg, &seeds, json!({"target_labels": targets, "coae": reports(&outcomes)})),
    )?;
    print_final(&outcomes.iter().map(RunOutcome::final_row).collect::<Vec<_>>());
    Ok(())
}

fn read_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Value::Object(map) = value else {
        bail!("{}: grid must be a JSON object of value lists", path.display());
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::Array(vals) => Ok((k, vals)),
            other => Ok((k, vec![other])),
        })
        .collect()
}

fn sweep(common: &Common, grid_path: &Path, repeats: usize) -> Result<()> {
    let cfg = load(common)?;
    let grid = read_grid(grid_path)?;
    let points = run_sweep(&cfg, &grid, repeats)?;
    let rows: Vec<MetricsRow> = points
        .iter()
        .flat_map(|p| p.outcomes.iter().flat_map(|o| o.rows.iter().cloned()))
        .collect();
    append_metrics(&common.out.join("metrics.csv"), &rows)?;
    write_summary(&common.out.join("summary.csv"), &points)?;
    let seeds: Vec<u64> = (0..repeats.max(1) as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let pts: Vec<Value> = points
        .iter()
        .map(|p| {
            json!({
                "index": p.index,
                "overrides": p.overrides,
                "config_hash": p.config.hash(),
                "config": p.config,
                "coae": reports(&p.outcomes),
            })
        })
        .collect();
    let grid_json: BTreeMap<_, _> = grid.iter().collect();
    write_json(
        &common.out.join("manifest.json"),
        &manifest("sweep", &cfg, &seeds, json!({"grid": grid_json, "repeats": repeats, "points": pts})),
    )?;
    for p in &points {
        let f = |s: Option<vfl_core::harness::Stat>| s.map_or("-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.std));
        println!(
            "{}  main {}  backdoor {}  recovery {}",
            serde_json::to_string(&p.overrides)?,
            f(p.main_accuracy()),
            f(p.backdoor_accuracy()),
            f(p.label_recovery())
        );
    }
    Ok(())
}

fn pdmatrix(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let (pd, outcomes) = emit_pd_matrix(&cfg)?;
    write_pd_matrix(&common.out.join("pd_matrix.csv"), &pd)?;
    let seeds: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
    write_json(
        &common.out.join("manifest.json"),
        &manifest(
            "pdmatrix",
            &cfg,
            &seeds,
            json!({"mean_row_entropy": pd.mean_row_entropy(), "coae": reports(&outcomes)}),
        ),
    )?;
    println!("mean row entropy {:.4}", pd.mean_row_entropy());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(c) => run(&c),
        Command::Sweep { common, grid, repeats } => sweep(&common, &grid, repeats),
        Command::Pdmatrix(c) => pdmatrix(&c),
    }
}
