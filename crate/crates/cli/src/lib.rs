//! `cro` command-line tool: data generation, training, calibration,
//! single-input solves, evaluation and benchmark grids.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{Cli, Command};
pub use error::{CliError, Result};

/// Crate version plus the git revision it was built from.
pub fn build_id() -> String {
    format!(
        "cro {} ({})",
        env!("CARGO_PKG_VERSION"),
        env!("CRO_GIT_REV")
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Calibrate(a) => commands::calibrate_cmd(a),
        Command::Solve(a) => commands::solve_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Bench(a) => commands::bench_cmd(a),
    }
}
