use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sepctl::harness::{self, ExperimentConfig, Format, HarnessError, PipelineOptions, Stage, StageStatus};

#[derive(Parser)]
#[command(name = "sepctl", version, about = "Open-loop optimization, LTV identification and LQG tracking for black-box plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment file; the built-in pendulum experiment when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the Monte Carlo run count.
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the nominal open-loop controls.
    Optimize,
    /// Identify the time-varying perturbation model around the nominal.
    Identify {
        /// Also write measured vs. reconstructed Markov parameters at this step.
        #[arg(long)]
        markov_step: Option<usize>,
    },
    /// Design feedback and Kalman gains.
    Gains,
    /// One closed-loop run with the configured seed.
    Run,
    /// Closed-loop Monte Carlo ensemble.
    Montecarlo,
    /// Every stage, resuming from intact artifacts.
    Pipeline,
    /// Print the built-in experiment as TOML.
    DefaultConfig,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(HarnessError::Config(_)) => 2,
        Some(HarnessError::Stage { stage, .. }) => match *stage {
            "optimize" => 3,
            "identify" => 4,
            "gains" => 5,
            _ => 6,
        },
        Some(HarnessError::AllRunsFailed(_)) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = cli.runs {
        cfg.runs = runs;
    }
    let (until, markov_step) = match cli.command {
        Command::DefaultConfig => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Optimize => (Stage::Optimize, None),
        Command::Identify { markov_step } => (Stage::Identify, markov_step),
        Command::Gains | Command::Run => (Stage::Gains, None),
        Command::Montecarlo | Command::Pipeline => (Stage::MonteCarlo, None),
    };
    let opts = PipelineOptions {
        out_dir: cli.out.clone(),
        until,
        format: cli.format,
        markov_step,
    };
    let out = harness::run_pipeline(&cfg, &opts)?;
    for (stage, status) in &out.status {
        let verb = match status {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "up to date",
        };
        eprintln!("{:<10} {verb}", stage.name());
    }

    let nominal = &out.nominal;
    println!(
        "nominal: cost {:.6}, {} iterations, stop {:?}",
        nominal.cost,
        nominal.log.len(),
        nominal.stop_reason
    );
    if let Some(r) = &out.realization {
        println!(
            "realization: order {}, valid steps {}..={}",
            r.order, r.valid_range.start, r.valid_range.end
        );
    }
    if let Some(errs) = &out.markov_errors {
        let shown: Vec<String> = errs.iter().map(|e| format!("{e:.3e}")).collect();
        println!("markov relative error per output: {}", shown.join(", "));
    }
    if let Some(stats) = &out.ensemble {
        println!(
            "ensemble: {} runs ({} failed), mean cost {:.6} ± {:.6}",
            stats.run_count, stats.failed_runs, stats.mean_cost, stats.cost_std_error
        );
    }

    if matches!(cli.command, Command::Run) {
        let plant = cfg.plant.build()?;
        let realization = out.realization.as_ref().context("identification missing")?;
        let gains = out.gains.as_ref().context("gains missing")?;
        let record = harness::closed_loop_run(plant.as_ref(), nominal, realization, gains, &cfg.noise, &cfg.cost()?, cfg.seed)?;
        match cli.format {
            Format::Csv => harness::write_ensemble_csv(
                std::slice::from_ref(&record),
                plant.state_dim(),
                plant.control_dim(),
                cfg.dt(),
                std::fs::File::create(cli.out.join("run.csv"))?,
            )?,
            Format::Json => harness::write_json(&record, &cli.out.join("run.json"))?,
        }
        match record.failed_at {
            Some(k) => println!("run: diverged at step {k}"),
            None => println!("run: cost {:.6}, final deviation {:.3e}", record.cost, record.deviation_norms.last().unwrap_or(&0.0)),
        }
    }
    Ok(())
}
