use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nicsim::config::{ConfigError, ExperimentConfig, NicModel};
use nicsim::experiment::{replay, run_check, run_simulate, sweep, ExperimentError};

#[derive(Debug, Parser)]
#[command(name = "nicsim", version, about = "Simulate and model-check an OS-integrated, cache-coherent NIC")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Workload seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// NIC model for `simulate`: sysname, baseline-interrupt or baseline-bypass.
    #[arg(long, global = true, value_name = "NAME")]
    model: Option<String>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one NIC model over the configured workload.
    Simulate,
    /// Explore the protocol state space and check S1 to S5.
    Check,
    /// Run every NIC model over the same workload.
    Sweep,
    /// Feed a checker trace through the simulator and compare states.
    Replay {
        #[arg(value_name = "TRACE")]
        trace: PathBuf,
    },
    /// Print the default config.
    PrintDefaults,
}

enum Failure {
    Usage(String),
    Experiment(ExperimentError),
    Violations(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Experiment(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Experiment(e.into())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(name) = &cli.model {
        cfg.model = NicModel::parse(name).ok_or_else(|| {
            let known: Vec<&str> = NicModel::ALL.iter().map(|m| m.as_str()).collect();
            Failure::Usage(format!("unknown model {name:?}; expected one of {}", known.join(", ")))
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn say(quiet: bool, text: &str) {
    if !quiet {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Command::PrintDefaults = cli.command {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let out: &Path = &cfg.output.dir;
    match &cli.command {
        Command::Simulate => {
            let art = run_simulate(&cfg)?;
            art.write(out)?;
            say(cli.quiet, &art.report_text());
        }
        Command::Sweep => {
            for art in sweep(&cfg)? {
                art.write(&out.join(art.model.as_str()))?;
                say(cli.quiet, &art.report_text());
            }
        }
        Command::Check => {
            let art = run_check(&cfg)?;
            art.write(out)?;
            say(cli.quiet, &art.summary());
            if !art.report.violations.is_empty() {
                return Err(Failure::Violations(format!(
                    "{} violation(s); traces in {}",
                    art.report.violations.len(),
                    out.display()
                )));
            }
        }
        Command::Replay { trace } => {
            let text = std::fs::read_to_string(trace)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", trace.display())))?;
            let summary = replay(&cfg, &text)?;
            say(cli.quiet, &format!("replayed {} steps without divergence", summary.steps));
            if let Some(v) = summary.violation {
                return Err(Failure::Violations(format!("replay reproduces {}: {}", v.property, v.detail)));
            }
        }
        Command::PrintDefaults => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Violations(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Experiment(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
