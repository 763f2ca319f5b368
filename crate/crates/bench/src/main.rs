use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use stokes_bench::report::{write_reports, write_summaries};
use stokes_bench::{run_any, BatchSummary, BenchError, GeometrySpec, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "bench", about = "Run Stokes solver scenarios and write CSV reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario JSON (one scenario or a list).
    scenario: PathBuf,
    /// Report CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregate CSV for snapshot batches.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Full reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Seed for the randomized sketches (overrides the scenario).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. The dense kernels run sequentially; values above 1 are ignored.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Compute Woodbury conditioning diagnostics.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    /// Panel count of the geometry (of the first component for explicit geometries).
    #[value(name = "N", alias = "n_panels")]
    Panels,
    /// Preconditioner accuracy.
    Eps,
    /// HBS compression tolerance.
    Compress,
    /// Low-rank update tolerance.
    Lowrank,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every scenario in a file.
    Run(Common),
    /// Run each scenario once per parameter value.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load(c: &Common) -> Result<Vec<Scenario>, BenchError> {
    if c.threads > 1 {
        warn!("--threads {} requested; running sequentially", c.threads);
    }
    let mut list = Scenario::load(&c.scenario)?;
    for s in &mut list {
        if let Some(seed) = c.seed {
            s.seed = seed;
        }
        s.diagnostics |= c.diagnostics;
    }
    Ok(list)
}

fn with_param(s: &Scenario, p: SweepParam, v: f64) -> Scenario {
    let mut s = s.clone();
    match p {
        SweepParam::Panels => {
            let current = s.geometry.components().first().map_or(1, |g| g.n_panels);
            s.geometry = match &s.geometry {
                GeometrySpec::Named { preset, .. } => GeometrySpec::Named {
                    preset: *preset,
                    n_panels: Some(v as usize),
                },
                g => g.scaled(v / current as f64),
            };
        }
        SweepParam::Eps => s.tolerances.precond = Some(v),
        SweepParam::Compress => s.tolerances.compress = v,
        SweepParam::Lowrank => s.tolerances.lowrank = v,
    }
    s.name = format!("{}@{v}", s.name);
    s
}

fn write_out(c: &Common, reports: &[RunReport], summaries: &[BatchSummary]) -> Result<(), BenchError> {
    match &c.out {
        Some(p) => write_reports(File::create(p)?, reports)?,
        None => write_reports(io::stdout().lock(), reports)?,
    }
    if let Some(p) = &c.summary {
        write_summaries(File::create(p)?, summaries)?;
    } else if !summaries.is_empty() {
        let mut e = io::stderr().lock();
        writeln!(e)?;
        write_summaries(e, summaries)?;
    }
    if let Some(p) = &c.json {
        write_json(p, reports, summaries)?;
    }
    Ok(())
}

fn write_json(p: &Path, reports: &[RunReport], summaries: &[BatchSummary]) -> Result<(), BenchError> {
    let v = serde_json::json!({ "reports": reports, "summaries": summaries });
    serde_json::to_writer_pretty(File::create(p)?, &v)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let (common, runs) = match &cli.cmd {
        Cmd::Run(c) => (c, load(c)?),
        Cmd::Sweep { common, param, values } => {
            let base = load(common)?;
            let runs = base
                .iter()
                .flat_map(|s| values.iter().map(move |&v| with_param(s, *param, v)))
                .collect();
            (common, runs)
        }
    };
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for s in &runs {
        info!("running {}", s.name);
        let (r, sum) = run_any(s)?;
        reports.extend(r);
        summaries.extend(sum);
    }
    write_out(common, &reports, &summaries)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
