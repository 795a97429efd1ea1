use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use frosty_core::binomial::{param_safety_report, parse_rational, SafetyInputs};
use frosty_core::simnet::{run_until, scenario_from_trace, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "frosty", version, about = "Run Frosty scenarios and parameter reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file for one seed or a range of seeds.
    Run(RunArgs),
    /// Exact binomial safety and liveness report.
    Params(ParamsArgs),
    /// Re-run the scenario recorded in a trace and compare the traces.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive range such as `1..50`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Directory for traces and summaries.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 80)]
    k: u64,
    #[arg(long = "a3", default_value_t = 48)]
    alpha3: u64,
    /// Byzantine fraction, as a decimal or `p/q`.
    #[arg(long, default_value = "0.2")]
    f: String,
    /// Fraction already holding a longer final.
    #[arg(long, default_value = "0.6")]
    good: String,
    #[arg(long, default_value_t = 300)]
    gamma: u64,
    #[arg(long, default_value_t = 10_000)]
    processes: u64,
    #[arg(long, default_value_t = 1000)]
    years: u64,
    #[arg(long, default_value_t = 5)]
    rounds_per_second: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Where to write the re-run trace, if anywhere.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let Some((a, b)) = s.split_once("..") else {
        return Ok(vec![s.trim().parse().context("expected a seed or a range like 1..50")?]);
    };
    let a: u64 = a.trim().parse().context("bad range start")?;
    let b: u64 = b.trim().trim_start_matches('=').parse().context("bad range end")?;
    if b < a {
        bail!("empty seed range {s}");
    }
    Ok((a..=b).collect())
}

fn write_artifacts(dir: &Path, stem: &str, report: &RunReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(format!("{stem}.jsonl")), report.trace_text())?;
    std::fs::write(dir.join(format!("{stem}.summary.json")), serde_json::to_string_pretty(&report.summary)? + "\n")?;
    Ok(())
}

fn print_row(report: &RunReport) {
    let s = &report.summary;
    println!(
        "{:>6} {:>7} {:>6} {:>7} {:>12} {:>8} {:>9}",
        s.seed,
        s.ticks,
        s.max_epoch,
        s.min_final_blocks,
        if report.consistency.ok { "ok" } else { "VIOLATED" },
        s.claim3_violations,
        s.double_notarizations,
    );
}

fn run(args: RunArgs) -> anyhow::Result<bool> {
    let base = Scenario::from_toml_file(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    let seeds = match (&args.seeds, args.seed) {
        (Some(r), _) => parse_seeds(r)?,
        (None, Some(s)) => vec![s],
        (None, None) => vec![base.seed],
    };
    let horizon = args.horizon.unwrap_or(base.horizon);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let mut results: Vec<(u64, frosty_core::Result<RunReport>)> = Vec::new();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<u64>> = (0..workers).map(|w| seeds.iter().copied().skip(w).step_by(workers).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let base = &base;
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|seed| {
                            let sc = Scenario { seed, horizon, ..base.clone() };
                            (seed, run_until(&sc, horizon))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            results.extend(h.join().expect("worker panicked"));
        }
    });
    results.sort_by_key(|(s, _)| *s);

    println!("{:>6} {:>7} {:>6} {:>7} {:>12} {:>8} {:>9}", "seed", "ticks", "epoch", "blocks", "consistency", "claim3", "dbl-notar");
    let mut all_ok = true;
    for (seed, res) in results {
        let report = res.with_context(|| format!("seed {seed}"))?;
        print_row(&report);
        all_ok &= report.ok() && report.claim3.violations.is_empty();
        let stem = format!("{}-seed{seed}", base.name);
        write_artifacts(&args.out, &stem, &report)?;
    }
    println!("verdict: {}", if all_ok { "OK" } else { "VIOLATION" });
    Ok(all_ok)
}

fn params(args: ParamsArgs) -> anyhow::Result<bool> {
    let inp = SafetyInputs {
        k: args.k,
        alpha3: args.alpha3,
        f_frac: parse_rational(&args.f)?,
        good_frac: parse_rational(&args.good)?,
        gamma: args.gamma,
        processes: args.processes,
        years: args.years,
        rounds_per_second: args.rounds_per_second,
    };
    let report = param_safety_report(&inp)?;
    print!("{report}");
    Ok(report.all_hold())
}

fn replay(args: ReplayArgs) -> anyhow::Result<bool> {
    let original = std::fs::read_to_string(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let scenario = scenario_from_trace(&original)?;
    let report = run_until(&scenario, scenario.horizon)?;
    let again = report.trace_text();
    if let Some(out) = &args.out {
        std::fs::write(out, &again)?;
    }
    match original.lines().zip(again.lines()).position(|(a, b)| a != b) {
        None if original.lines().count() == again.lines().count() => {
            println!("identical: {} records", again.lines().count());
            Ok(true)
        }
        None => {
            println!("differs: {} records recorded, {} replayed", original.lines().count(), again.lines().count());
            Ok(false)
        }
        Some(i) => {
            println!("differs at line {}:\n- {}\n+ {}", i + 1, original.lines().nth(i).unwrap(), again.lines().nth(i).unwrap());
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => run(a),
        Command::Params(a) => params(a),
        Command::Replay(a) => replay(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
