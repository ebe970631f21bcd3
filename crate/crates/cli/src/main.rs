use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use modal_dynamics::scenario::{
    builtin_names, load_scenario, run, write_exports, CurrentKind, ExportLevel, RunOptions, ScenarioError,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIAGNOSTIC: u8 = 3;
const EXIT_POLE_ABORT: u8 = 4;

#[derive(Parser)]
#[command(name = "modal-dyn", version, about = "Stochastic property dynamics for modal scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or built-in scenario and write its exports.
    Run {
        /// Path to a scenario JSON file, or a built-in name.
        scenario: String,
        /// Output directory.
        #[arg(long, env = "MODAL_DYN_OUT")]
        out: Option<PathBuf>,
        /// Override the ensemble master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of sampled paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Override the current constructor.
        #[arg(long)]
        current: Option<CurrentKind>,
        /// Write only manifest, scenario and report.
        #[arg(long)]
        report_only: bool,
    },
    /// Print the names of the built-in scenarios.
    ListBuiltins,
    /// Parse and validate a scenario without running it.
    Validate { file: String },
}

fn exit_code(e: &ScenarioError) -> u8 {
    if e.is_pole_abort() {
        EXIT_POLE_ABORT
    } else if e.is_validation() || matches!(e, ScenarioError::Io { .. }) {
        EXIT_VALIDATION
    } else {
        EXIT_DIAGNOSTIC
    }
}

fn fail(e: ScenarioError) -> anyhow::Result<u8> {
    eprintln!("error: {e}");
    Ok(exit_code(&e))
}

fn run_command(
    source: &str,
    out: Option<PathBuf>,
    seed: Option<u64>,
    paths: Option<usize>,
    current: Option<CurrentKind>,
    report_only: bool,
) -> anyhow::Result<u8> {
    let mut scenario = match load_scenario(source) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(seed) = seed {
        scenario.ensemble.master_seed = seed;
    }
    if let Some(paths) = paths {
        scenario.ensemble.paths = paths;
    }
    if let Some(current) = current {
        scenario.current = current;
    }
    if let Err(e) = scenario.validate() {
        return fail(e);
    }
    let output = match run(&scenario, &RunOptions::default()) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&scenario.name));
    let level = if report_only { ExportLevel::ReportOnly } else { ExportLevel::Full };
    let manifest = match write_exports(&dir, &scenario, &output, level) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let report = serde_json::to_string_pretty(&output.report).context("serializing report")?;
    println!("{report}");
    eprintln!("wrote {} files to {}", manifest.files.len() + 1, dir.display());
    if output.report.passed {
        Ok(0)
    } else {
        for f in &output.report.failures {
            eprintln!("diagnostic failure: {f}");
        }
        Ok(EXIT_DIAGNOSTIC)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, seed, paths, current, report_only } => {
            run_command(&scenario, out, seed, paths, current, report_only)
        }
        Command::ListBuiltins => {
            builtin_names().iter().for_each(|n| println!("{n}"));
            Ok(0)
        }
        Command::Validate { file } => match load_scenario(&file) {
            Ok(s) => {
                println!("ok: {} ({} states)", s.name, s.total_dim());
                Ok(0)
            }
            Err(e) => fail(e),
        },
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DIAGNOSTIC)
        }
    }
}
