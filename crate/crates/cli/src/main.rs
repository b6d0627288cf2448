//! `rla`: run curricula, evaluate and compare programs, aggregate results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rla_discovery::dataset::{self, DatasetSpec};
use rla_discovery::equiv::programs_equivalent;
use rla_discovery::exec::{ExecConfig, Status, REPORT_GRID};
use rla_discovery::instance::{generate, Ensemble, Family, InstanceSpec, ProblemInstance};
use rla_discovery::ir::{canonicalize_symbolic, parse_program, serialize, Program};
use rla_discovery::reward::{evaluate, RewardWeights};
use rla_discovery::rng::SeededStream;
use rla_discovery::search::Mode;

mod config;
mod discover;
mod report;

use config::RunConfig;

/// Overrides the output root.
pub const ENV_OUT: &str = "RLA_OUT";
/// Overrides the worker-thread count.
pub const ENV_THREADS: &str = "RLA_THREADS";

/// Exit code for an invalid configuration or command line.
const EXIT_USAGE: u8 = 2;
/// Exit code for a program file that does not parse.
const EXIT_PARSE: u8 = 3;

#[derive(Parser)]
#[command(name = "rla", version, about = "Curriculum-staged search for randomized linear algebra programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a curriculum for one or more seeds.
    Discover(DiscoverArgs),
    /// Execute a program on a synthetic instance or a dataset.
    Eval(EvalArgs),
    /// Check two programs for equivalence.
    Equiv(EquivArgs),
    /// Aggregate finished runs into ECDF, success and revisit tables.
    Report(ReportArgs),
    /// Write a sampled instance to a delimited file.
    GenInstance(GenArgs),
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed (or start counting here with --seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    method: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Playout budget for every stage.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InstanceArgs {
    #[arg(long, value_parser = parse_upper::<Family>, default_value = "LOW_COND")]
    family: Family,
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_parser = parse_upper::<Ensemble>, default_value = "GAUSSIAN")]
    leverage: Ensemble,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl InstanceArgs {
    fn spec(&self) -> InstanceSpec {
        let mut s = InstanceSpec::new(self.family, self.m, self.n).with_leverage(self.leverage);
        s.kappa_target = self.kappa;
        s
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Program file or shipped program name.
    program: String,
    #[command(flatten)]
    instance: InstanceArgs,
    /// Delimited numeric file with a header row; replaces the synthetic instance.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Response column of the dataset.
    #[arg(long, default_value = "b")]
    target: String,
    /// Leading rows that form the training split.
    #[arg(long)]
    train_rows: Option<usize>,
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivArgs {
    first: PathBuf,
    second: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or roots to search for them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_upper<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    let tag = s.to_ascii_uppercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(tag)).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Discover(a) => finish(cmd_discover(a)),
        Command::Eval(a) => finish(cmd_eval(a)),
        Command::Equiv(a) => cmd_equiv(a),
        Command::Report(a) => finish(cmd_report(a)),
        Command::GenInstance(a) => finish(cmd_gen(a)),
    }
}

/// Errors tagged as usage errors exit with [`EXIT_USAGE`], others with 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn finish(r: Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn env_or<T: std::str::FromStr>(var: &str) -> Result<Option<T>> {
    match std::env::var(var) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| anyhow!(Usage(format!("{var}=`{v}` is not valid")))),
        Err(_) => Ok(None),
    }
}

fn cmd_discover(a: DiscoverArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).map_err(|e| anyhow!(Usage(format!("{e:#}"))))?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(b) = a.budget {
        cfg.search.budget = Some(b);
    }
    match (a.seed, a.seeds) {
        (start, Some(k)) => {
            let s = start.unwrap_or(0);
            cfg.seeds = (s..s + k).collect();
        }
        (Some(s), None) => cfg.seeds = vec![s],
        (None, None) => {}
    }
    let out = a
        .out
        .or(env_or::<PathBuf>(ENV_OUT)?)
        .or(cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let threads = a.threads.or(env_or(ENV_THREADS)?).or(cfg.threads).unwrap_or(1);
    if threads == 0 {
        return Err(anyhow!(Usage("threads must be at least 1".into())));
    }
    cfg.validate().map_err(|e| anyhow!(Usage(format!("{e:#}"))))?;
    let records = discover::discover(&cfg, &out, threads)?;
    for r in &records {
        println!("{}", r.summary_row());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    program: String,
    m: usize,
    n: usize,
    status: Status,
    residual: f64,
    flops: u64,
    best_eta: f64,
    seconds: f64,
    reward: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let program = config::load_program(&a.program)?;
    let inst: ProblemInstance = match &a.dataset {
        Some(path) => {
            let mut spec = DatasetSpec::new(&a.target);
            spec.train_rows = a.train_rows;
            spec.delimiter = u8::try_from(a.delimiter).map_err(|_| anyhow!(Usage("delimiter must be ASCII".into())))?;
            dataset::load(path, &spec)?.into_instance()
        }
        None => generate(&a.instance.spec(), a.instance.seed).map_err(|e| anyhow!("instance: {e}"))?,
    };
    if program.env != inst.env {
        return Err(anyhow!(Usage(format!(
            "a {} program cannot run on a {} instance",
            program.env, inst.env
        ))));
    }
    let mut cfg = ExecConfig::for_env(inst.env);
    if let Some(t) = a.iterations {
        cfg.iterations = t;
    }
    let grid = a.grid.unwrap_or_else(|| REPORT_GRID.to_vec());
    let start = Instant::now();
    let rng = SeededStream::new(a.instance.seed);
    let (trace, b) = evaluate(&program, &inst, &grid, &cfg, &RewardWeights::for_stage(3), &rng);
    let report = EvalReport {
        program: a.program.clone(),
        m: inst.m(),
        n: inst.n(),
        status: trace.status,
        residual: trace.final_metric(),
        flops: trace.flops,
        best_eta: trace.eta,
        seconds: start.elapsed().as_secs_f64(),
        reward: b.total,
    };
    println!("status    {:?}", report.status);
    println!("residual  {:e}", report.residual);
    println!("flops     {}", report.flops);
    println!("best eta  {}", report.best_eta);
    println!("seconds   {:.3}", report.seconds);
    if let Some(out) = a.out {
        std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn read_program(path: &Path) -> Result<Program, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_program(&text, None).map_err(|e| format!("{}:{}: {}", path.display(), e.line, e.message))
}

fn cmd_equiv(a: EquivArgs) -> ExitCode {
    let (p1, p2) = match (read_program(&a.first), read_program(&a.second)) {
        (Ok(p1), Ok(p2)) => (p1, p2),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_PARSE);
        }
    };
    println!("canonical form of {}:\n{}", a.first.display(), serialize(&canonicalize_symbolic(&p1)));
    println!("canonical form of {}:\n{}", a.second.display(), serialize(&canonicalize_symbolic(&p2)));
    let v = programs_equivalent(&p1, &p2, a.trials, a.seed);
    println!("verdict: {} ({})", if v.equivalent { "equivalent" } else { "not equivalent" }, v.detail);
    if v.equivalent {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let o = report::report(&a.runs, &a.out)?;
    println!("{} runs aggregated, {} skipped", o.runs, o.skipped.len());
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let inst = generate(&a.instance.spec(), a.instance.seed).map_err(|e| anyhow!("instance: {e}"))?;
    let n = inst.n();
    let with_b = !inst.b.is_empty();
    let mut w = String::new();
    let mut header: Vec<String> = (1..=n).map(|j| format!("a{j}")).collect();
    if with_b {
        header.push("b".into());
    }
    w.push_str(&header.join(","));
    w.push('\n');
    let data = inst.a.data();
    for i in 0..inst.m() {
        let mut row: Vec<String> = data[i * n..(i + 1) * n].iter().map(|v| format!("{v:?}")).collect();
        if with_b {
            row.push(format!("{:?}", inst.b[i]));
        }
        w.push_str(&row.join(","));
        w.push('\n');
    }
    std::fs::write(&a.out, w).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}x{} {:?} instance to {}", inst.m(), n, inst.spec.family, a.out.display());
    Ok(())
}
