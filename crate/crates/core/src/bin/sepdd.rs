use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};

use sepdd::cli::{self, CliError};
use sepdd::clock::SystemClock;
use sepdd::config::RunConfig;

#[derive(Parser)]
#[command(name = "sepdd", version, about = "Self-evolving ML pipeline search")]
struct Args {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Start a run in an empty run directory.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set budget.max_nodes=6`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run only if this indicator file fires a trigger.
        #[arg(long)]
        indicator: Option<PathBuf>,
    },
    /// Continue an interrupted run.
    Resume {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Resume even if the config differs from the one that started the run.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Evaluate an indicator file and print the fired trigger as JSON.
    CheckTriggers {
        indicator: PathBuf,
        /// Evaluation instant (RFC 3339); defaults to now.
        #[arg(long)]
        now: Option<DateTime<Utc>>,
    },
    /// Print the evolution tree of a run.
    Tree { run_dir: PathBuf },
    /// Print the report of a run.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Convert recorded exchanges into a playback table.
    ReplayRecord { recordings: PathBuf, table: PathBuf },
}

fn print_report(report: &sepdd::report::Report, config: &RunConfig) {
    print!("{}", report.to_text(&config.metrics));
}

fn dispatch(verb: Verb) -> Result<i32, CliError> {
    let clock = Arc::new(SystemClock);
    match verb {
        Verb::Run { config, set, indicator } => {
            let cfg = RunConfig::load(&config, &set)?;
            let trigger = match indicator {
                Some(p) => {
                    let check = cli::cmd_check_triggers(&p, Utc::now())?;
                    if !check.fired {
                        println!("no trigger fired; nothing to do");
                        return Ok(cli::EXIT_OK);
                    }
                    check.trigger
                }
                None => None,
            };
            let report = cli::cmd_run(&cfg, trigger, clock)?;
            print_report(&report, &cfg);
            Ok(cli::report_exit_code(&report))
        }
        Verb::Resume { config, set, allow_config_mismatch } => {
            let cfg = RunConfig::load(&config, &set)?;
            let report = cli::cmd_resume(&cfg, allow_config_mismatch, clock)?;
            print_report(&report, &cfg);
            Ok(cli::report_exit_code(&report))
        }
        Verb::CheckTriggers { indicator, now } => {
            let check = cli::cmd_check_triggers(&indicator, now.unwrap_or_else(Utc::now))?;
            println!("{}", serde_json::to_string(&check).expect("trigger check serializes"));
            Ok(cli::EXIT_OK)
        }
        Verb::Tree { run_dir } => {
            print!("{}", cli::cmd_tree(&run_dir)?);
            Ok(cli::EXIT_OK)
        }
        Verb::Report { run_dir, json } => {
            let (report, text) = cli::cmd_report(&run_dir)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{text}");
            }
            Ok(cli::report_exit_code(&report))
        }
        Verb::ReplayRecord { recordings, table } => {
            let n = cli::cmd_replay_record(&recordings, &table)?;
            println!("wrote {n} playback entries to {}", table.display());
            Ok(cli::EXIT_OK)
        }
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let args = Args::parse();
    let code = match dispatch(args.verb) {
        Ok(code) => code,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).context("serializing error record")?;
            eprintln!("{record}");
            e.exit_code()
        }
    };
    Ok(ExitCode::from(code as u8))
}
