use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use haptic_takeover::config::{ConfigError, ExperimentConfig};
use haptic_takeover::experiment::{self, participant_dir, validate_tables, write_run};
use haptic_takeover::metrics::read_table;
use haptic_takeover::sim::{Condition, Task};

/// Environment variable that sets the output root.
const OUT_ENV: &str = "TAKEOVER_OUT";

#[derive(Parser)]
#[command(
    name = "takeover",
    version,
    about = "Steering takeover simulations and cohort experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one participant on one task under one condition.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        condition: Condition,
        #[arg(long, default_value_t = 1)]
        participant: usize,
    },
    /// Run every participant, task and condition and aggregate the results.
    Cohort {
        #[command(flatten)]
        common: Common,
        /// Cohort size.
        #[arg(long)]
        participants: Option<usize>,
        /// Worker threads; 0 uses all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate per-participant tables and compare with the published means.
    ValidateTables {
        #[arg(long, default_value = "data/task_a.csv")]
        task_a: PathBuf,
        #[arg(long, default_value = "data/task_b.csv")]
        task_b: PathBuf,
        /// Number of participants each table must contain.
        #[arg(long, default_value_t = 26)]
        participants: usize,
    },
    /// Print the effective configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable sensor noise.
    #[arg(long, conflicts_with = "no_noise")]
    noise: bool,
    /// Disable sensor noise.
    #[arg(long)]
    no_noise: bool,
    /// Output root.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if self.noise {
            cfg.scenario.noise_enabled = true;
        }
        if self.no_noise {
            cfg.scenario.noise_enabled = false;
        }
        if let Some(out) = &self.out {
            cfg.experiment.output_root = out.display().to_string();
        }
        Ok(cfg)
    }
}

enum Failure {
    Config(String),
    Run(String),
}

fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.experiment.output_root).join(&cfg.experiment.name)
}

fn checked(cfg: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            common,
            task,
            condition,
            participant,
        } => {
            let cfg = checked(common.load().map_err(|e| Failure::Config(e.to_string()))?)?;
            if !cfg.participant_ids().contains(&participant) {
                return Err(Failure::Config(format!(
                    "participant {participant} is outside 1..={}",
                    cfg.experiment.participants
                )));
            }
            let record = experiment::run_single(&cfg, task, condition, participant)
                .map_err(|e| Failure::Run(e.to_string()))?;
            let dir = participant_dir(&experiment_dir(&cfg), participant);
            let path = write_run(&dir, &format!("{task}_{condition}"), &record)
                .map_err(|e| Failure::Run(format!("writing {}: {e}", dir.display())))?;
            println!("wrote {}", path.display());
            match (record.events.completion, &record.failure) {
                (_, Some(reason)) => return Err(Failure::Run(reason.clone())),
                (Some(t4), None) => println!("takeover time {:.2} s", t4 - record.events.tor),
                (None, None) => println!("takeover did not complete"),
            }
            Ok(())
        }
        Command::Cohort {
            common,
            participants,
            threads,
        } => {
            let mut cfg = common.load().map_err(|e| Failure::Config(e.to_string()))?;
            if let Some(n) = participants {
                cfg.experiment.participants = n;
            }
            if let Some(t) = threads {
                cfg.experiment.threads = t;
            }
            let cfg = checked(cfg)?;
            let result = experiment::run_cohort(&cfg);
            let dir = experiment_dir(&cfg);
            result
                .write(&dir)
                .map_err(|e| Failure::Run(format!("writing {}: {e}", dir.display())))?;
            print!("{result}");
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::ValidateTables {
            task_a,
            task_b,
            participants,
        } => {
            let mut tables = Vec::new();
            for (task, path) in [(Task::A, task_a), (Task::B, task_b)] {
                let file = fs::File::open(&path)
                    .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
                let rows = read_table(file, participants)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                tables.push((task, rows));
            }
            let report = validate_tables(&tables).map_err(|e| Failure::Run(e.to_string()))?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Run("published means not reproduced".into()))
            }
        }
        Command::PrintConfig { common } => {
            let cfg = checked(common.load().map_err(|e| Failure::Config(e.to_string()))?)?;
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
