use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wvtr_core::harness::{emit_csv, emit_summary, run_experiment, ExperimentConfig};
use wvtr_core::statcheck::{run_battery, write_battery_csv, ConcentrationTrial};
use wvtr_core::{make_riverswim, optimal_values, RewardMode};

#[derive(Parser, Debug)]
#[command(name = "wvtr", version, about = "Weighted value-targeted regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a multi-seed regret experiment and write per-episode CSV.
    Run(RunArgs),
    /// Run the concentration coverage batteries and print a violation table.
    Statcheck(StatcheckArgs),
    /// Print the optimal value table of RiverSwim.
    Dp(DpArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML experiment file; the default RiverSwim(5, H=20) setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Per-agent final regret summary; `<out>.summary.csv` by default.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatcheckArgs {
    /// Trials per (δ, σ) cell.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.2])]
    deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3])]
    sigmas: Vec<f64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DpArgs {
    /// Take the environment from an experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n_states: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    #[arg(long, default_value_t = RewardMode::Raw)]
    reward_mode: RewardMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("regret");
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn output_writer(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::riverswim_default(5, 20, 5000, 10),
    };
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(episodes) = args.episodes {
        config.episodes = episodes;
    }
    if let Some(out) = args.out {
        config.output = Some(out);
    }
    let out = config.output.clone().unwrap_or_else(|| PathBuf::from("regret.csv"));
    let result = run_experiment(&config)?;
    emit_csv(&result, &out).with_context(|| format!("writing {}", out.display()))?;
    let summary = args.summary.unwrap_or_else(|| summary_path(&out));
    emit_summary(&result, &summary)?;

    println!("agent\tseeds\tepisodes\tmean_final_regret\tstd\tstderr");
    for agg in result.aggregate() {
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            agg.agent, agg.seeds, agg.episodes, agg.mean_final_regret, agg.std_final_regret, agg.stderr_final_regret
        );
    }
    for failure in &result.failures {
        eprintln!(
            "run failed: agent={} seed={}: {}",
            failure.agent, failure.seed, failure.message
        );
    }
    Ok(if result.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn statcheck(args: StatcheckArgs) -> anyhow::Result<ExitCode> {
    if args.trials == 0 {
        bail!("--trials must be positive");
    }
    let mut reports = Vec::new();
    for &sigma in &args.sigmas {
        for &delta in &args.deltas {
            let trial = ConcentrationTrial {
                sigma,
                delta,
                ..Default::default()
            };
            reports.push(run_battery(&trial, args.trials, args.seed)?);
        }
    }
    write_battery_csv(&reports, output_writer(args.out.as_deref())?)?;
    Ok(if reports.iter().all(|r| r.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn dp(args: DpArgs) -> anyhow::Result<ExitCode> {
    let mdp = match &args.config {
        Some(path) => ExperimentConfig::load(path)?.environment.build()?,
        None => make_riverswim(args.n_states, args.horizon, args.reward_mode)?,
    };
    let values = optimal_values(&mdp);
    let mut out = output_writer(args.out.as_deref())?;
    writeln!(out, "h,state,value")?;
    for h in 0..=mdp.horizon() {
        for s in 0..mdp.n_states() {
            writeln!(out, "{},{},{}", h + 1, s + 1, values.get(h, s))?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Statcheck(args) => statcheck(args),
        Command::Dp(args) => dp(args),
    }
}
