use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flsim::harness::{
    analyze_pr, analyze_prob, analyze_tdmi, cmd_run, cmd_sweep, parse_override, SweepAxis, SweepOptions,
    DEFAULT_SWEEP_CAP, EXIT_CONFIG,
};
use flsim::metrics::{DEFAULT_BINS, DEFAULT_DELAY};
use flsim::Error;

#[derive(Parser)]
#[command(name = "flsim", version, about = "Federated-learning poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the cartesian product of swept keys.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Swept key and its values (repeatable).
        #[arg(long = "vary", value_name = "KEY=V1,V2,...")]
        axes: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Refuse sweeps with more runs than this.
        #[arg(long, default_value_t = DEFAULT_SWEEP_CAP)]
        cap: usize,
        #[arg(long)]
        force: bool,
    },
    /// Post-process a run directory.
    Analyze {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Run directory (tdmi, pr).
        run_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DELAY)]
        delay: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Total clients (prob).
        #[arg(short = 'K', long = "clients")]
        clients: Option<usize>,
        /// Malicious clients (prob).
        #[arg(short = 'b', long = "malicious")]
        malicious: Option<usize>,
        /// Clients selected per round (prob).
        #[arg(short = 'm', long = "selected")]
        selected: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tdmi,
    Pr,
    Prob,
}

fn overrides(list: &[String]) -> flsim::Result<Vec<(String, String)>> {
    list.iter().map(|s| parse_override(s)).collect()
}

fn need<T>(value: Option<T>, what: &str) -> flsim::Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn execute(cli: Cli) -> flsim::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            overrides: sets,
            force,
        } => {
            let summary = cmd_run(&config, &out, &overrides(&sets)?, force)?;
            println!(
                "best_accuracy={} precision={} recall={} -> {}",
                summary.best_accuracy,
                summary.precision,
                summary.recall,
                out.display()
            );
        }
        Command::Sweep {
            config,
            out,
            overrides: sets,
            axes,
            jobs,
            cap,
            force,
        } => {
            let opts = SweepOptions {
                overrides: overrides(&sets)?,
                axes: axes.iter().map(|a| a.parse()).collect::<flsim::Result<Vec<SweepAxis>>>()?,
                jobs,
                cap,
                force,
            };
            let n = cmd_sweep(&config, &out, &opts)?;
            println!("{n} runs -> {}", out.display());
        }
        Command::Analyze {
            mode,
            run_dir,
            delay,
            bins,
            clients,
            malicious,
            selected,
        } => match mode {
            Mode::Prob => {
                let p = analyze_prob(
                    need(clients, "--clients")?,
                    need(malicious, "--malicious")?,
                    need(selected, "--selected")?,
                )?;
                println!("{p}");
            }
            Mode::Pr => {
                let r = analyze_pr(&need(run_dir, "run directory")?)?;
                println!("P={:?} R={:?}", r.precision, r.recall);
            }
            Mode::Tdmi => {
                let r = analyze_tdmi(&need(run_dir, "run directory")?, delay, bins)?;
                println!(
                    "legitimate={:.4} poisoned={:.4} t={:.4} p={:e}",
                    r.legitimate_mean, r.poisoned_mean, r.statistic, r.p_value
                );
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
