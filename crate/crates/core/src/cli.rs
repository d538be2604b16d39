//! Command-line front end.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::analysis::{instance_certificates, NoTradeCertificate};
use crate::document::{read_instance, read_plan, render_instance, PlanDocument};
use crate::error::{Error, Result};
use crate::market::RoutingInstance;
use crate::optimality::{check_cq, check_support, verify_kkt, CqReport, KktReport};
use crate::scenarios::{
    example1, example1_scaled_prices, example2, example2_prices, PoolFunction, EXAMPLE2_GAS,
};
use crate::solver::{
    solve_exact_enumeration, solve_relaxed, SolveOptions, SolveResult, SolveStatus,
};
use crate::sweep::{
    compare, flagged_intervals, fmt_float, no_trade_map, write_compare_csv, write_map_csv, Axis,
    CompareRow, FeeSetting, MapRow, Scenario, SweepSpec,
};

const CSV_HELP: &str = "\
CSV output (floats carry 17 significant digits, rows follow grid order):
  no_trade_map.csv  gas,t,s,no_trade,solver_no_trade,objective,rounded_objective,
                    epsilon,cq,kkt,status,member_<i>...,eta_<i>...
  compare.csv       gas,t,s,relaxed_objective,rounded_objective,exact_objective,
                    epsilon,upper_margin,lower_margin,bound_margin,holds,status
  prices.csv        market,asset,token,price
See docs/csv.md for column meanings.

Exit codes: 0 success, 1 other failure, 2 unreadable or malformed input,
3 solver did not converge (outputs are still written).";

#[derive(Debug, Parser)]
#[command(
    name = "cfmm-router",
    version,
    about = "Optimal routing across CFMMs with fixed gas fees"
)]
#[command(after_help = CSV_HELP)]
pub struct Cli {
    /// Worker threads (defaults to every core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for the multi-start draws.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Solver starts per problem, the zero plan included.
    #[arg(long, global = true, default_value_t = 8)]
    pub restarts: usize,
    /// Tolerance of the KKT verification.
    #[arg(long, global = true, default_value_t = 1e-5)]
    pub tol: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the relaxed problem (and optionally the binary one) for an
    /// instance file.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Also solve the binary problem by enumeration.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check the first-order conditions at a plan, or at the relaxed
    /// solution when no plan is given.
    KktCheck {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Certificates and relaxed solves over a sweep grid.
    NoTradeMap {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Relaxed, rounded and exact objectives over a sweep grid.
    Compare {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a built-in scenario's instance, prices and sweeps, then run them.
    Examples {
        name: ExampleName,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Points per sweep axis (80 for the single pool, 200 for the
        /// network).
        #[arg(long)]
        grid: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleName {
    Example1Gm,
    Example1Qm,
    Example2,
}

/// Outcome of a command before it becomes an exit code.
#[derive(Debug)]
enum Failure {
    Input(Error),
    Other(Error),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Other(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Maps errors met while loading inputs to the parse-failure exit code.
fn input<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Input)
}

pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let options = SolveOptions {
        restarts: cli.restarts,
        seed: cli.seed,
        ..SolveOptions::default()
    };
    if let Err(e) = options.validate() {
        eprintln!("error: {e}");
        return 1;
    }
    let outcome = match &cli.command {
        Command::Solve {
            instance,
            exact,
            out,
        } => cmd_solve(instance, *exact, out, &options, cli.tol),
        Command::KktCheck { instance, plan } => {
            cmd_kkt_check(instance, plan.as_deref(), &options, cli.tol)
        }
        Command::NoTradeMap { sweep, out } => input(SweepSpec::read(sweep))
            .and_then(|spec| cmd_no_trade_map(&spec, out, &options, cli.tol)),
        Command::Compare { sweep, out } => {
            input(SweepSpec::read(sweep)).and_then(|spec| cmd_compare(&spec, out, &options))
        }
        Command::Examples { name, out, grid } => cmd_examples(*name, out, *grid, &options, cli.tol),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::NotConverged) => {
            eprintln!("error: the solver did not converge; see the written outputs");
            3
        }
    }
}

/// Parses the process arguments and runs the selected command.
pub fn main() -> i32 {
    run(Cli::parse())
}

#[derive(Serialize)]
struct SolveReport<'a> {
    relaxed: &'a SolveResult,
    exact: Option<&'a SolveResult>,
    support: bool,
    cq: CqReport,
    kkt: KktReport,
    certificates: Vec<NoTradeCertificate>,
}

fn print_plan(inst: &RoutingInstance, r: &SolveResult) {
    println!(
        "status {:?}, objective {}",
        r.status,
        fmt_float(r.objective)
    );
    for (i, mk) in inst.markets.iter().enumerate() {
        if r.plan.is_market_idle(i) {
            println!("  market {i}: idle (eta {})", r.plan.eta[i]);
            continue;
        }
        println!(
            "  market {i}: eta {} tokens {:?} receive {:?} tender {:?}",
            r.plan.eta[i], mk.tokens, r.plan.x[i], r.plan.y[i]
        );
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_solve(path: &Path, exact: bool, out: &Path, options: &SolveOptions, tol: f64) -> CmdResult {
    let inst = input(read_instance(path))?;
    let relaxed = solve_relaxed(&inst, options)?;
    println!("relaxed problem");
    print_plan(&inst, &relaxed);
    let exact = if exact {
        let e = solve_exact_enumeration(&inst, options)?;
        println!("binary problem");
        print_plan(&inst, &e);
        Some(e)
    } else {
        None
    };
    let kkt = verify_kkt(&inst, &relaxed.plan, tol)?;
    print!("{kkt}");
    let report = SolveReport {
        relaxed: &relaxed,
        exact: exact.as_ref(),
        support: check_support(&relaxed.plan, tol),
        cq: check_cq(&inst, &relaxed.plan),
        kkt,
        certificates: instance_certificates(&inst)?,
    };
    fs::create_dir_all(out).map_err(Error::from)?;
    let file = out.join("solve_report.json");
    write_json(&file, &report)?;
    info!("wrote {}", file.display());
    let converged = relaxed.status == SolveStatus::Converged
        && exact
            .as_ref()
            .is_none_or(|e| e.status == SolveStatus::Converged);
    if converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn cmd_kkt_check(path: &Path, plan: Option<&Path>, options: &SolveOptions, tol: f64) -> CmdResult {
    let inst = input(read_instance(path))?;
    let plan = match plan {
        Some(p) => input(read_plan(p))?,
        None => {
            let r = solve_relaxed(&inst, options)?;
            if r.status != SolveStatus::Converged {
                return Err(Failure::NotConverged);
            }
            println!(
                "{}",
                serde_json::to_string(&PlanDocument::from(&r.plan)).map_err(Error::from)?
            );
            r.plan
        }
    };
    let cq = check_cq(&inst, &plan);
    if !cq.holds {
        println!(
            "qualification condition fails at {} asset(s)",
            cq.violations.len()
        );
    }
    print!("{}", verify_kkt(&inst, &plan, tol)?);
    Ok(())
}

fn map_summary(rows: &[MapRow]) {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.gas.as_str()) {
            labels.push(&r.gas);
        }
    }
    for label in labels {
        let sub: Vec<&MapRow> = rows.iter().filter(|r| r.gas == label).collect();
        let certified = sub.iter().filter(|r| r.no_trade).count();
        let solved = sub.iter().filter(|r| r.solver_no_trade).count();
        let agree = sub
            .iter()
            .filter(|r| r.no_trade == r.solver_no_trade)
            .count();
        println!(
            "gas {label}: {} points, certified no-trade {certified}, solver no-trade {solved}, agreement {:.2}%",
            sub.len(),
            100.0 * agree as f64 / sub.len() as f64
        );
        if sub.iter().all(|r| r.s.is_none()) {
            let ts: Vec<f64> = sub.iter().map(|r| r.t).collect();
            let flags: Vec<bool> = sub.iter().map(|r| r.solver_no_trade).collect();
            for (a, b) in flagged_intervals(&ts, &flags) {
                println!("  solver no-trade interval t in [{a}, {b}]");
            }
        }
    }
}

fn all_converged<'a>(mut statuses: impl Iterator<Item = &'a SolveStatus>) -> CmdResult {
    if statuses.all(|s| *s == SolveStatus::Converged) {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn cmd_no_trade_map(spec: &SweepSpec, out: &Path, options: &SolveOptions, tol: f64) -> CmdResult {
    let rows = no_trade_map(spec, options, tol)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let file = out.join("no_trade_map.csv");
    write_map_csv(
        &rows,
        BufWriter::new(File::create(&file).map_err(Error::from)?),
    )?;
    println!("wrote {}", file.display());
    map_summary(&rows);
    all_converged(rows.iter().map(|r| &r.status))
}

fn cmd_compare(spec: &SweepSpec, out: &Path, options: &SolveOptions) -> CmdResult {
    let rows = compare(spec, options)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let file = out.join("compare.csv");
    write_compare_csv(
        &rows,
        BufWriter::new(File::create(&file).map_err(Error::from)?),
    )?;
    println!("wrote {}", file.display());
    compare_summary(&rows);
    all_converged(rows.iter().map(|r| &r.status))
}

fn compare_summary(rows: &[CompareRow]) {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.gas.as_str()) {
            labels.push(&r.gas);
        }
    }
    for label in labels {
        let sub: Vec<&CompareRow> = rows.iter().filter(|r| r.gas == label).collect();
        let gap = sub
            .iter()
            .map(|r| (r.rounded_objective - r.exact_objective).abs())
            .fold(0.0, f64::max);
        let held = sub.iter().filter(|r| r.holds).count();
        println!(
            "gas {label}: {} points, bound holds at {held}, largest |rounded - exact| {gap:.3e}",
            sub.len()
        );
    }
}

fn write_prices(path: &Path, rows: &[(usize, usize, usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["market", "asset", "token", "price"])?;
    for (i, j, t, p) in rows {
        w.write_record([i.to_string(), j.to_string(), t.to_string(), fmt_float(*p)])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_examples(
    name: ExampleName,
    out: &Path,
    grid: Option<usize>,
    options: &SolveOptions,
    tol: f64,
) -> CmdResult {
    let dir = out.join(match name {
        ExampleName::Example1Gm => "example1-gm",
        ExampleName::Example1Qm => "example1-qm",
        ExampleName::Example2 => "example2",
    });
    fs::create_dir_all(&dir).map_err(Error::from)?;

    match name {
        ExampleName::Example1Gm | ExampleName::Example1Qm => {
            let phi = if name == ExampleName::Example1Gm {
                PoolFunction::GeometricMean
            } else {
                PoolFunction::QuasiArithmetic
            };
            let inst = example1(phi, 1.0, 1.0, 0.0)?;
            fs::write(dir.join("instance.json"), render_instance(&inst)?).map_err(Error::from)?;
            let prices: Vec<_> = example1_scaled_prices(phi)?
                .into_iter()
                .enumerate()
                .map(|(j, p)| (0, j, j, p))
                .collect();
            write_prices(&dir.join("prices.csv"), &prices)?;
            let points = grid.unwrap_or(80);
            let spec = SweepSpec::new(Scenario::Example1 {
                phi,
                t: Axis::new(0.0, 2.0, points),
                s: Axis::new(0.0, 2.0, points),
                gas: vec![0.0, 0.05, 0.2],
            });
            fs::write(dir.join("sweep.json"), spec.to_json()?).map_err(Error::from)?;
            cmd_no_trade_map(&spec, &dir, options, tol)
        }
        ExampleName::Example2 => {
            let inst = example2(1.0, &[EXAMPLE2_GAS; 5])?;
            fs::write(dir.join("instance.json"), render_instance(&inst)?).map_err(Error::from)?;
            let mut prices = Vec::new();
            for (i, (mk, p)) in inst.markets.iter().zip(example2_prices()?).enumerate() {
                for (j, (&t, v)) in mk.tokens.iter().zip(p).enumerate() {
                    prices.push((i, j, t, v));
                }
            }
            write_prices(&dir.join("prices.csv"), &prices)?;
            let points = grid.unwrap_or(200);
            let t = Axis::new(0.2, 9.0, points);
            let map = SweepSpec::new(Scenario::Example2 {
                t,
                gas: vec![
                    FeeSetting::Uniform(EXAMPLE2_GAS),
                    FeeSetting::PerMarket(vec![
                        EXAMPLE2_GAS,
                        EXAMPLE2_GAS,
                        EXAMPLE2_GAS,
                        9.4,
                        EXAMPLE2_GAS,
                    ]),
                ],
            });
            let cmp = SweepSpec::new(Scenario::Example2 {
                t,
                gas: [0.01, 0.1, 0.5, 1.0]
                    .into_iter()
                    .map(FeeSetting::Uniform)
                    .collect(),
            });
            fs::write(dir.join("sweep_map.json"), map.to_json()?).map_err(Error::from)?;
            fs::write(dir.join("sweep_compare.json"), cmp.to_json()?).map_err(Error::from)?;
            let a = cmd_no_trade_map(&map, &dir, options, tol);
            let b = cmd_compare(&cmp, &dir, options);
            a.and(b)
        }
    }
}
