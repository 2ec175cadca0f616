use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use urllc_lab::assoc::RegionRatio;
use urllc_lab::error::Result;
use urllc_lab::experiments::{
    exit_code, run_all, run_assoc, run_fed, run_mobility, run_scheduler, trajectory_preset, validate_config, AssocArgs,
    AssocPhase, ExperimentConfig, FedArgs, RunReport, SchedulerArgs, SchedulerPhase,
};
use urllc_lab::parallel::resolve_jobs;

#[derive(Parser)]
#[command(name = "urllc-lab", version, about = "URLLC learning experiments: mobility prediction, DRL scheduling, user association, federated averaging")]
struct Cli {
    /// TOML experiment config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `fed --cells`, the aggregated model file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "URLLC_LAB_JOBS")]
    jobs: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Newton vs MLP trajectory prediction error table.
    Mobility {
        /// smooth_random | const_accel | sinusoid
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Required accuracy in metres.
        #[arg(long)]
        accuracy: Option<f64>,
    },
    /// DRL bandwidth scheduler: pretrain, evaluate, fine-tune.
    Scheduler {
        #[arg(long, default_value = "all")]
        phase: SchedulerPhase,
        #[arg(long)]
        agent_in: Option<PathBuf>,
        #[arg(long)]
        agent_out: Option<PathBuf>,
    },
    /// Offloading/association oracle, DNN and distribution shift.
    Assoc {
        #[arg(long, default_value = "all")]
        phase: AssocPhase,
        #[arg(long)]
        ratio: Option<RegionRatio>,
        /// Dataset CSV for `--phase train`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Hierarchical averaging of model files, or the forecaster demo without --cells.
    Fed {
        #[arg(long, value_delimiter = ',')]
        cells: Vec<PathBuf>,
        /// CSV with `model,count` rows.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Every experiment plus a text summary.
    All,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => validate_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let fed_files = matches!(&cli.command, Command::Fed { cells, .. } if !cells.is_empty());
    if let (Some(o), false) = (&cli.out, fed_files) {
        cfg.out_dir = o.clone();
    }
    if let Command::Mobility { kind, horizon, accuracy } = &cli.command {
        if let Some(k) = kind {
            cfg.mobility.trajectory = trajectory_preset(k)?;
        }
        if let Some(h) = horizon {
            cfg.mobility.horizons_ms = vec![*h];
        }
        if let Some(a) = accuracy {
            cfg.mobility.accuracies_m = vec![*a];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Option<RunReport>> {
    let cfg = resolve(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    let jobs = resolve_jobs(cli.jobs);
    let report = match &cli.command {
        Command::Mobility { .. } => run_mobility(&cfg, jobs)?,
        Command::Scheduler { phase, agent_in, agent_out } => run_scheduler(
            &cfg,
            &SchedulerArgs {
                phase: *phase,
                agent_in: agent_in.clone(),
                agent_out: agent_out.clone(),
            },
            jobs,
        )?,
        Command::Assoc { phase, ratio, dataset, model_in, model_out } => run_assoc(
            &cfg,
            &AssocArgs {
                phase: Some(*phase),
                ratio: *ratio,
                dataset: dataset.clone(),
                model_in: model_in.clone(),
                model_out: model_out.clone(),
            },
            jobs,
        )?,
        Command::Fed { cells, counts } => run_fed(
            &cfg,
            &FedArgs {
                cells: cells.clone(),
                counts: counts.clone(),
                model_out: cli.out.clone(),
            },
        )?,
        Command::All => run_all(&cfg, jobs)?,
    };
    Ok(Some(report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(report)) => {
            match serde_json::to_string_pretty(&report.metrics) {
                Ok(s) => println!("{s}"),
                Err(e) => eprintln!("urllc-lab: cannot print metrics: {e}"),
            }
            eprintln!("wrote {} files in {:.1}s", report.files.len(), report.wall_clock_s);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("urllc-lab: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
