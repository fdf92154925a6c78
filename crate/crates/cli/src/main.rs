//! `dlrt`: training runs, integrator comparisons, ODE error studies and
//! descent audits.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O or data error,
//! 3 training diverged, 4 descent inequality violated.

mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{AuditSettings, CompareSettings, OdeSettings, Overrides, TrainSettings};

#[derive(Parser)]
#[command(
    name = "dlrt",
    version,
    about = "Dynamical low-rank training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network on MNIST.
    Train(Overrides),
    /// Train every integrator over a set of seeds and tabulate the results.
    Compare(Overrides),
    /// Error-vs-step-size study on a synthetic quadratic problem.
    OdeBench(Overrides),
    /// Check the abc-PSI descent inequality step by step.
    DescentAudit(Overrides),
}

pub enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
    Diverged(String),
    Violation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Io(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::Violation(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) => format!("configuration error: {e:#}"),
            Failure::Io(e) => format!("I/O error: {e:#}"),
            Failure::Diverged(m) => format!("training diverged: {m}"),
            Failure::Violation(m) => format!("descent inequality violated: {m}"),
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let settings = |o: &Overrides| o.resolve().map_err(Failure::Config);
    match command {
        Command::Train(o) => commands::cmd_train(
            &TrainSettings::from_overrides(&settings(&o)?).map_err(Failure::Config)?,
        ),
        Command::Compare(o) => commands::cmd_compare(
            &CompareSettings::from_overrides(&settings(&o)?).map_err(Failure::Config)?,
        ),
        Command::OdeBench(o) => commands::cmd_ode_bench(
            &OdeSettings::from_overrides(&settings(&o)?).map_err(Failure::Config)?,
        ),
        Command::DescentAudit(o) => commands::cmd_descent_audit(
            &AuditSettings::from_overrides(&settings(&o)?).map_err(Failure::Config)?,
        ),
    }
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
