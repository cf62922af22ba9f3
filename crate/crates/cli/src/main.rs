use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gridbound::oracle::{self, FlatObjective, GRID_SEARCH_MAX_DIM};
use gridbound::{compute_bounds, gap, load_case, BoundModel, BoundReport, Error, GridCase, ModelOptions};
use serde::Serialize;

/// Exit statuses. Certified infeasibility gets its own code because it is a
/// successful run with a result automation should act on.
mod exit {
    pub const OK: u8 = 0;
    pub const INPUT: u8 = 1;
    pub const ISLANDING: u8 = 2;
    pub const INFEASIBLE: u8 = 3;
    pub const VIOLATIONS: u8 = 4;
    pub const USAGE: u8 = 64;
}

#[derive(Parser, Debug)]
#[command(name = "gridbound", version, about = "Certified surplus bounds for security-constrained DC dispatch")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Drop contingencies that would island the network instead of failing.
    #[arg(long, global = true)]
    skip_islanding: bool,
    /// Propagate intervals node by node through the curve cascades.
    #[arg(long, global = true)]
    strict_cascade: bool,
    /// Write the command output here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certified lower and upper bounds on the market surplus.
    Bound { case: PathBuf },
    /// Try to falsify the bounds by sampling and, for small cases, grid search.
    Verify(VerifyArgs),
    /// Base-case PTDF as CSV, one row per line.
    Ptdf { case: PathBuf },
    /// Write a random connected case.
    Gen(GenArgs),
    /// Time repeated bound computations on a random case.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    case: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid points per dimension for the exhaustive search.
    #[arg(long, default_value_t = 21, value_parser = clap::value_parser!(u64).range(1..))]
    resolution: u64,
    /// Lower the certified upper bound by 1 before checking; must fail.
    #[arg(long)]
    self_test: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    buses: u64,
    #[arg(long)]
    seed: u64,
    /// Lines per spanning-tree edge.
    #[arg(long, default_value_t = 1.5)]
    density: f64,
    /// Keep at most this many contingencies.
    #[arg(long)]
    ctg: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    buses: u64,
    #[arg(long)]
    ctg: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    density: f64,
}

#[derive(Serialize)]
struct BoundOutput {
    #[serde(flatten)]
    report: BoundReport,
    skip_islanding: bool,
    skipped_contingencies: Vec<usize>,
    strict_cascade: bool,
}

#[derive(Serialize)]
struct OracleOutput {
    resolution: usize,
    value: f64,
    argmax: Vec<f64>,
    evaluations: usize,
}

#[derive(Serialize)]
struct VerifyOutput {
    case: String,
    seed: u64,
    samples: usize,
    corners: usize,
    violations: usize,
    lower: f64,
    upper: f64,
    sampled_min: f64,
    sampled_max: f64,
    self_test: bool,
    oracle: Option<OracleOutput>,
    oracle_exceeds_upper: bool,
    gap_vs_oracle: Option<f64>,
    skipped_contingencies: Vec<usize>,
}

#[derive(Serialize)]
struct BenchOutput {
    buses: usize,
    lines: usize,
    contingencies: usize,
    seed: u64,
    threads: usize,
    build_s: f64,
    samples: Vec<f64>,
    min_s: f64,
    mean_s: f64,
    max_s: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(exit::USAGE);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Islanding { .. }) => exit::ISLANDING,
                _ => exit::INPUT,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let options = ModelOptions {
        skip_islanding: cli.skip_islanding,
        strict_cascade: cli.strict_cascade,
    };
    match &cli.command {
        Command::Bound { case } => {
            let model = build_model(case, options)?;
            let report = model.bounds()?;
            let code = if report.infeasible_certificate { exit::INFEASIBLE } else { exit::OK };
            let out = BoundOutput {
                report,
                skip_islanding: cli.skip_islanding,
                skipped_contingencies: model.skipped_contingencies.clone(),
                strict_cascade: cli.strict_cascade,
            };
            emit(cli, &to_json(&out)?)?;
            Ok(code)
        }
        Command::Verify(args) => verify(cli, args, options),
        Command::Ptdf { case } => {
            let case = read_case(case)?;
            let network = gridbound::build_ptdf(&case)?;
            let mut csv = String::new();
            for row in network.ptdf.row_iter() {
                let cells: Vec<String> = row.iter().map(|&v| format!("{}", v + 0.0)).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            emit(cli, &csv)?;
            Ok(exit::OK)
        }
        Command::Gen(args) => {
            let mut case = oracle::random_case(args.buses as usize, args.density, args.seed);
            if let Some(k) = args.ctg {
                let kept = case.contingencies.iter().copied().take(k).collect();
                case = case.with_contingencies(kept)?;
            }
            emit(cli, &format!("{}\n", case.to_json()))?;
            Ok(exit::OK)
        }
        Command::Bench(args) => bench(cli, args, options),
    }
}

fn read_case(path: &Path) -> anyhow::Result<GridCase> {
    load_case(path).with_context(|| format!("loading {}", path.display()))
}

fn build_model(path: &Path, options: ModelOptions) -> anyhow::Result<BoundModel> {
    let case = read_case(path)?;
    let mut model = BoundModel::build(case, options)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model.graph = model.graph.with_name(name);
    Ok(model)
}

fn verify(cli: &Cli, args: &VerifyArgs, options: ModelOptions) -> anyhow::Result<u8> {
    let model = build_model(&args.case, options)?;
    let report = model.bounds()?;
    let upper = if args.self_test { report.objective_upper - 1.0 } else { report.objective_upper };

    // The oracle sees the same contingency set the bounds were built on.
    let checked = model.case.with_contingencies(model.contingencies.line_ids.clone())?;
    let flat = FlatObjective::new(&checked)?;
    let summary = oracle::count_violations(&flat, report.objective_lower, upper, args.samples as usize, args.seed)?;

    let grid = if checked.n_inputs() <= GRID_SEARCH_MAX_DIM {
        Some(oracle::grid_search_with(&flat, args.resolution as usize)?)
    } else {
        log::info!("skipping grid search: {} inputs exceed {}", checked.n_inputs(), GRID_SEARCH_MAX_DIM);
        None
    };
    let oracle_exceeds_upper = grid.as_ref().is_some_and(|g| g.value > upper);
    let gap_vs_oracle = grid.as_ref().and_then(|g| gap(&report, g.value).ok());

    let out = VerifyOutput {
        case: report.case_id.clone(),
        seed: args.seed,
        samples: summary.samples,
        corners: summary.corners,
        violations: summary.violations,
        lower: report.objective_lower,
        upper,
        sampled_min: summary.min_seen,
        sampled_max: summary.max_seen,
        self_test: args.self_test,
        oracle: grid.map(|g| OracleOutput {
            resolution: args.resolution as usize,
            value: g.value,
            argmax: g.argmax,
            evaluations: g.evaluations,
        }),
        oracle_exceeds_upper,
        gap_vs_oracle,
        skipped_contingencies: model.skipped_contingencies.clone(),
    };
    emit(cli, &to_json(&out)?)?;
    Ok(if out.violations > 0 || oracle_exceeds_upper { exit::VIOLATIONS } else { exit::OK })
}

fn bench(cli: &Cli, args: &BenchArgs, options: ModelOptions) -> anyhow::Result<u8> {
    let case = oracle::random_case(args.buses as usize, args.density, args.seed);
    let kept: Vec<usize> = case.contingencies.iter().copied().take(args.ctg).collect();
    if kept.len() < args.ctg {
        log::warn!("only {} non-islanding contingencies available, requested {}", kept.len(), args.ctg);
    }
    let case = case.with_contingencies(kept)?;

    let start = Instant::now();
    let model = BoundModel::build(case, options)?;
    let build_s = start.elapsed().as_secs_f64();
    let input = model.graph.full_box();
    let samples = (0..args.repeat)
        .map(|_| compute_bounds(&model.graph, &input).map(|r| r.wall_time))
        .collect::<gridbound::Result<Vec<f64>>>()?;

    let out = BenchOutput {
        buses: model.case.n_buses(),
        lines: model.case.n_lines(),
        contingencies: model.contingencies.len(),
        seed: args.seed,
        threads: rayon::current_num_threads(),
        build_s,
        min_s: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max_s: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_s: samples.iter().sum::<f64>() / samples.len() as f64,
        samples,
    };
    emit(cli, &to_json(&out)?)?;
    Ok(exit::OK)
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn emit(cli: &Cli, text: &str) -> anyhow::Result<()> {
    match &cli.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}
