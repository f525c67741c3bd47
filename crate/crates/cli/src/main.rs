//! Batch experiment runner. Three subcommands: `run` executes one training
//! run and writes its round log plus a one-row summary table, `compare`
//! sweeps the policy x k x seed factorial onto a comparison table, and
//! `bound-check` audits the closed-form loss bound against Monte-Carlo
//! training on a parameter grid. Every failure exits nonzero with a
//! machine-readable JSON error record on stderr.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mafl_core::config::ExperimentConfig;
use mafl_core::experiment::{
    run_bound_check, run_compare, run_experiment, AGGREGATE_HEADER,
};
use mafl_core::runlog::{write_jsonl, write_summary_csv, SUMMARY_HEADER};
use mafl_core::scheduler::PolicyKind;
use std::path::PathBuf;
use std::str::FromStr;

/// Output-root environment variable; the `--out` flag overrides it and the
/// config's `run.output_dir` is the fallback.
const OUT_ROOT_ENV: &str = "MAFL_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "mafl",
    version,
    about = "Over-the-air federated fine-tuning experiments with repositionable arrays"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its round log and summary row.
    Run(RunArgs),
    /// Run the policy x k x seed factorial and write the comparison tables.
    Compare(CompareArgs),
    /// Check the convergence bound against Monte-Carlo runs on a grid.
    BoundCheck(BoundCheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML; an empty file means all defaults).
    config: PathBuf,
    /// Output directory; overrides MAFL_OUT_ROOT and run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Master seed; defaults to run.master_seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated policy names; defaults to all of them.
    #[arg(long)]
    policies: Option<String>,
    /// Comma-separated concurrency values; defaults to the config's policy.k.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated seeds; defaults to run.seeds from the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent grid cells.
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct BoundCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid axes as `m=5,10;n=10,20;sigma2=0,0.001`; omitted axes keep their
    /// defaults (m=5,10,20,40; n=10,20,40,80; sigma2=0,0.001).
    #[arg(long)]
    grid: Option<String>,
    /// Monte-Carlo replicates per grid point.
    #[arg(long, default_value_t = 100)]
    seeds_per_point: usize,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::BoundCheck(args) => cmd_bound_check(args),
    };
    if let Err(e) = result {
        // One JSON object per failure so callers can parse the reason.
        eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let cfg = ExperimentConfig::from_toml(&text)
        .with_context(|| format!("parsing config {}", common.config.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir))
}

fn cell_stem(policy: PolicyKind, k: usize, seed: u64) -> String {
    format!("{policy}_k{k}_seed{seed}")
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let vals: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} entry {s:?}: {e}"))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        bail!("{what} list is empty");
    }
    Ok(vals)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = out_dir(&args.common, &cfg);
    let seed = args.seed.unwrap_or(cfg.run.master_seed);
    let log = run_experiment(&cfg, seed)?;
    let stem = cell_stem(cfg.policy.kind, cfg.policy.k, seed);
    let log_path = out.join(format!("{stem}.jsonl"));
    write_jsonl(&log_path, &log)?;
    let csv_path = out.join(format!("{stem}.csv"));
    write_summary_csv(&csv_path, &[log.summary.csv_row()])?;
    println!("{SUMMARY_HEADER}");
    println!("{}", log.summary.csv_row());
    if let Some(halt) = &log.halt {
        println!("halt: {halt}");
    }
    println!("log: {}", log_path.display());
    println!("summary: {}", csv_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = out_dir(&args.common, &cfg);
    let policies: Vec<PolicyKind> = match &args.policies {
        Some(text) => parse_list(text, "policy")?,
        None => PolicyKind::ALL.to_vec(),
    };
    let ks: Vec<usize> = match &args.k {
        Some(text) => parse_list(text, "k")?,
        None => vec![cfg.policy.k],
    };
    let seeds: Vec<u64> = match &args.seeds {
        Some(text) => parse_list(text, "seed")?,
        None => cfg.run.seeds.clone(),
    };
    // Fail fast on a bad k instead of burying it in per-cell errors.
    for &k in &ks {
        let mut probe = cfg.clone();
        probe.policy.k = k;
        probe.validate()?;
    }
    let report = run_compare(&cfg, &policies, &ks, &seeds, args.workers)?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output dir {}", out.display()))?;
    for cell in &report.cells {
        if let Some(log) = &cell.log {
            let path = out.join(format!("{}.jsonl", cell_stem(cell.policy, cell.k, cell.seed)));
            write_jsonl(&path, log)?;
        }
    }
    let cell_rows = report.cell_rows();
    write_summary_csv(&out.join("comparison.csv"), &cell_rows)?;
    let agg_rows = report.aggregate_rows();
    let mut agg_text = String::from(AGGREGATE_HEADER);
    agg_text.push('\n');
    for row in &agg_rows {
        agg_text.push_str(row);
        agg_text.push('\n');
    }
    std::fs::write(out.join("comparison_aggregates.csv"), agg_text)?;
    let failures = report.failures();
    if !failures.is_empty() {
        std::fs::write(out.join("failures.txt"), failures.join("\n") + "\n")?;
    }
    println!("{SUMMARY_HEADER}");
    for row in &cell_rows {
        println!("{row}");
    }
    println!("{AGGREGATE_HEADER}");
    for row in &agg_rows {
        println!("{row}");
    }
    println!("table: {}", out.join("comparison.csv").display());
    println!(
        "aggregates: {}",
        out.join("comparison_aggregates.csv").display()
    );
    if !failures.is_empty() {
        println!(
            "failed cells: {} (see {})",
            failures.len(),
            out.join("failures.txt").display()
        );
    }
    Ok(())
}

fn parse_grid(text: Option<&str>) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let mut ms: Vec<usize> = vec![5, 10, 20, 40];
    let mut ns: Vec<usize> = vec![10, 20, 40, 80];
    let mut sigmas: Vec<f64> = vec![0.0, 1e-3];
    if let Some(text) = text {
        for part in text.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, vals) = part
                .split_once('=')
                .with_context(|| format!("grid axis {part:?} is not key=v1,v2,..."))?;
            match key.trim() {
                "m" => ms = parse_list(vals, "m")?,
                "n" => ns = parse_list(vals, "n")?,
                "sigma2" => sigmas = parse_list(vals, "sigma2")?,
                other => bail!("unknown grid axis {other:?} (expected m, n, or sigma2)"),
            }
        }
    }
    Ok((ms, ns, sigmas))
}

fn cmd_bound_check(args: BoundCheckArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = out_dir(&args.common, &cfg);
    let (ms, ns, sigmas) = parse_grid(args.grid.as_deref())?;
    let report = run_bound_check(&cfg, &ms, &ns, &sigmas, args.seeds_per_point)?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output dir {}", out.display()))?;
    let path = out.join("bound_check.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    for p in &report.points {
        println!(
            "m={} n={} sigma2={} bound={:.6e} empirical={:.6e} slack={:.6e} \
             fine_decay={:.6e} noise_floor={:.6e} grad_avg={:.6e} contained={} {}",
            p.pretrain_rounds,
            p.finetune_rounds,
            p.noise_variance,
            p.bound_total,
            p.empirical_mean,
            p.slack,
            p.fine_decay,
            p.noise_floor,
            p.grad_avg_term,
            p.trajectories_contained,
            if p.violated { "VIOLATED" } else { "OK" }
        );
    }
    println!("violations: {} / {}", report.violations, report.points.len());
    println!(
        "ball_radius={:.6} shift_distance={:.6} shift_sensitivity={:.6}",
        report.ball_radius, report.shift_distance, report.shift_sensitivity
    );
    println!("report: {}", path.display());
    Ok(())
}
