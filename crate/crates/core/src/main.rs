use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use pihte::decomposition::{parse_decomposition, DecomposeOptions, DecompositionFile};
use pihte::engine::{analyze, estimate, EvalError, EvalOptions, MetricsRow, DEFAULT_MAX_ENTRIES};
use pihte::estimand::{flatten, parse_estimand, Estimand};
use pihte::oracle::run_suite;
use pihte::scm::{random_cbn, Cbn, Distribution};
use pihte::{CausalGraph, Dataset, Error, Exec, SparseFactor};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_RESOURCE: u8 = 4;
const EXIT_ORACLE: u8 = 5;

#[derive(Parser)]
#[command(name = "pihte", version, about = "Evaluate causal estimands on sparse empirical tables")]
struct Cli {
    /// Run every step on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Cap on the entries of any materialized table.
    #[arg(long, global = true, env = "PIHTE_MAX_ENTRIES", default_value_t = DEFAULT_MAX_ENTRIES)]
    max_entries: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flatten an estimand and report decompositions and bounds per level.
    Analyze(AnalyzeArgs),
    /// Evaluate an estimand on a dataset.
    Estimate(EstimateArgs),
    /// Compare the engine with dense enumeration on random instances.
    Oracle(OracleArgs),
    /// Draw a random network for a graph and sample a dataset from it.
    Simulate(SimulateArgs),
    /// Estimate on datasets of growing size and print one metrics row each.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EstimandArgs {
    /// Estimand text, e.g. "P(Y|do(X)) = sum[Z](P(Y|X,Z) P(Z))".
    #[arg(long, conflicts_with = "estimand_file")]
    estimand: Option<String>,
    #[arg(long)]
    estimand_file: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Decomposition file to use instead of the built-in search.
    #[arg(long)]
    decomposition: Option<PathBuf>,
    /// Extra randomized min-fill runs.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    estimand: EstimandArgs,
    /// Graph supplying domain sizes (binary otherwise).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Nominal table size for the bounds.
    #[arg(long, default_value_t = 1000)]
    t: usize,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    estimand: EstimandArgs,
    #[arg(long)]
    graph: PathBuf,
    /// CSV with one column per graph variable.
    #[arg(long)]
    data: PathBuf,
    /// Clamp free variables, e.g. --do X=1,Z=0.
    #[arg(long = "do", value_delimiter = ',')]
    do_assignment: Vec<String>,
    /// Variables to renormalize over (defaults to the query outcome).
    #[arg(long, value_delimiter = ',')]
    outcome: Vec<String>,
    /// Report the raw sum-product without renormalizing.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest relative discrepancy accepted.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Largest joint assignment space the dense side may enumerate.
    #[arg(long, default_value_t = 1e7)]
    dense_limit: f64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct NetworkArgs {
    #[arg(long, required_unless_present = "cbn")]
    graph: Option<PathBuf>,
    /// Network JSON to sample from instead of drawing one.
    #[arg(long)]
    cbn: Option<PathBuf>,
    /// Table family: uniform, dirichlet, deterministic or mixture.
    #[arg(long, default_value = "dirichlet")]
    dist: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long)]
    rows: usize,
    /// Dataset CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the drawn network here.
    #[arg(long)]
    save_cbn: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    estimand: EstimandArgs,
    /// Dataset sizes, e.g. --sizes 1000,2000,4000.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Decomposition file to use instead of the built-in search.
    #[arg(long)]
    decomposition: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Lib(Error),
    Oracle(usize, usize),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Oracle(..) => EXIT_ORACLE,
            Failure::Lib(Error::Eval(EvalError::DivisionInconsistency { .. })) => EXIT_NUMERIC,
            Failure::Lib(Error::Eval(e)) if e.is_resource() => EXIT_RESOURCE,
            Failure::Lib(Error::Sim(pihte::scm::SimError::DenseLimitExceeded { .. })) => EXIT_RESOURCE,
            Failure::Lib(Error::Dense(pihte::estimand::DenseError::DenseLimitExceeded { .. })) => EXIT_RESOURCE,
            Failure::Lib(_) => EXIT_INPUT,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Input(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
            Failure::Oracle(bad, total) => format!("{bad} of {total} oracle instances disagree"),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Failure::Input(e.to_string()))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::Input(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn load_estimand(a: &EstimandArgs) -> Result<Estimand> {
    let text = match (&a.estimand, &a.estimand_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => read(p)?,
        (None, None) => return Err(Failure::Input("one of --estimand or --estimand-file is required".into())),
    };
    Ok(parse_estimand(&text)?)
}

fn load_supplied(s: &SearchArgs) -> Result<Option<DecompositionFile>> {
    s.decomposition.as_deref().map(|p| Ok(parse_decomposition(&read(p)?)?)).transpose()
}

fn decompose_opts(s: &SearchArgs, exec: Exec) -> DecomposeOptions {
    DecomposeOptions { restarts: s.restarts, seed: s.seed, exec }
}

fn parse_do(items: &[String]) -> Result<Vec<(String, u32)>> {
    items
        .iter()
        .map(|item| {
            let (n, v) =
                item.split_once('=').ok_or_else(|| Failure::Input(format!("--do expects NAME=VALUE, got {item:?}")))?;
            let v = v.trim().parse().map_err(|_| Failure::Input(format!("bad value in --do {item:?}")))?;
            Ok((n.trim().to_string(), v))
        })
        .collect()
}

fn table_csv(f: &SparseFactor) -> String {
    let mut s: String = f.scope_names().iter().map(|n| format!("{n},")).collect();
    s.push_str("p\n");
    for (k, v) in f.iter() {
        for x in k {
            s.push_str(&format!("{x},"));
        }
        s.push_str(&format!("{v}\n"));
    }
    s
}

fn network(a: &NetworkArgs) -> Result<Cbn> {
    if let Some(p) = &a.cbn {
        let cbn = Cbn::load(p)?;
        cbn.check()?;
        return Ok(cbn);
    }
    let dist = Distribution::parse(&a.dist, a.alpha)
        .ok_or_else(|| Failure::Input(format!("unknown distribution family {:?}", a.dist)))?;
    if a.alpha <= 0.0 {
        return Err(Failure::Input("--alpha must be positive".into()));
    }
    let graph = CausalGraph::load(a.graph.as_ref().expect("clap requires --graph without --cbn"))?;
    Ok(random_cbn(&graph, dist, a.seed))
}

fn run_analyze(a: &AnalyzeArgs, exec: Exec) -> Result<()> {
    let est = load_estimand(&a.estimand)?;
    let graph = a.graph.as_deref().map(CausalGraph::load).transpose()?;
    let domain = |n: &str| match &graph {
        Some(g) => g.variable(n).map(|v| v.domain_size()),
        None => Some(2),
    };
    let hier = flatten(&est.expr);
    let supplied = load_supplied(&a.search)?;
    let analysis = analyze(&hier, &domain, a.t, decompose_opts(&a.search, exec), supplied.as_ref())?;
    emit(a.out.as_deref(), &to_json(&analysis)?)
}

fn run_estimate(a: &EstimateArgs, exec: Exec, max_entries: usize) -> Result<()> {
    let est = load_estimand(&a.estimand)?;
    let graph = CausalGraph::load(&a.graph)?;
    let data = Dataset::load(&a.data, &graph)?;
    let opts = EvalOptions {
        exec,
        decompose: decompose_opts(&a.search, exec),
        supplied: load_supplied(&a.search)?,
        do_assignment: parse_do(&a.do_assignment)?,
        outcome: (!a.outcome.is_empty()).then(|| a.outcome.clone()),
        renormalize: !a.raw,
        max_entries,
    };
    let report = estimate(&est, &data, &opts)?;
    info!("evaluated {} levels in {:.3}s", report.levels.len(), report.wall_time_secs);
    let text = match a.format {
        Format::Json => to_json(&report)?,
        Format::Csv => table_csv(&report.result),
    };
    emit(a.out.as_deref(), &text)
}

fn run_oracle(a: &OracleArgs, exec: Exec) -> Result<()> {
    let outcomes = run_suite(a.count, a.seed, a.tol, a.dense_limit, exec)?;
    let text = match a.format {
        Format::Json => to_json(&outcomes)?,
        Format::Csv => {
            let mut s = String::from("seed,levels,max_abs,max_rel,pass\n");
            for o in &outcomes {
                let d = o.discrepancy;
                s.push_str(&format!("{},{},{:e},{:e},{}\n", o.seed, o.levels, d.max_abs, d.max_rel, o.pass));
            }
            s
        }
    };
    emit(None, &text)?;
    let bad = outcomes.iter().filter(|o| !o.pass).count();
    if bad > 0 {
        return Err(Failure::Oracle(bad, outcomes.len()));
    }
    Ok(())
}

fn run_simulate(a: &SimulateArgs, exec: Exec) -> Result<()> {
    let cbn = network(&a.network)?;
    if let Some(p) = &a.save_cbn {
        cbn.save(p)?;
    }
    let data = cbn.sample(a.rows, a.network.seed, exec);
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf))
}

fn run_bench(a: &BenchArgs, exec: Exec, max_entries: usize) -> Result<()> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(Failure::Input("--sizes needs at least one positive size".into()));
    }
    let est = load_estimand(&a.estimand)?;
    let cbn = network(&a.network)?;
    let supplied = a.decomposition.as_deref().map(|p| Ok::<_, Failure>(parse_decomposition(&read(p)?)?)).transpose()?;
    let opts = EvalOptions { exec, max_entries, supplied, ..EvalOptions::default() };
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (i, &n) in a.sizes.iter().enumerate() {
        let data = cbn.sample(n, a.network.seed.wrapping_add(1 + i as u64), exec);
        let report = estimate(&est, &data, &opts)?;
        info!("n={n}: max table {} entries", report.max_table_entries);
        rows.push(report.metrics());
    }
    let text = match a.format {
        Format::Json => to_json(&rows)?,
        Format::Csv => {
            let mut s = format!("{}\n", MetricsRow::CSV_HEADER);
            for r in &rows {
                s.push_str(&r.to_csv());
                s.push('\n');
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let result = match &cli.cmd {
        Command::Analyze(a) => run_analyze(a, exec),
        Command::Estimate(a) => run_estimate(a, exec, cli.max_entries),
        Command::Oracle(a) => run_oracle(a, exec),
        Command::Simulate(a) => run_simulate(a, exec),
        Command::Bench(a) => run_bench(a, exec, cli.max_entries),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
