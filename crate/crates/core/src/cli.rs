//! The command-line verbs as library calls. The `sepdd` binary only parses
//! arguments, calls one of these, and prints the result.
//!
//! Exit codes: 0 success, 1 unexpected I/O failure, 2 configuration error,
//! 3 run finished without a valid node, 4 corrupt or unreadable run state.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::clock::Clock;
use crate::config::{ConfigError, RunConfig};
use crate::engine::{EngineError, Evolution, IndicatorFile, TriggerError, TriggerEvent};
use crate::journal::{read_journal, Journal, JournalError, JournalEvent, ReplayError, JOURNAL_FILE};
use crate::operators::{build_playback_table, BackendError};
use crate::report::{build_report, render_tree, Report, ReportError, ReportStatus};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TREE_TEXT: &str = "tree.txt";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_VALID_NODE: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run directory {0} is not empty")]
    RunDirNotEmpty(PathBuf),
    #[error("no journal at {0}")]
    MissingJournal(PathBuf),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Replay(r) => CliError::Journal(JournalError::Replay(r)),
            ReportError::Strategy(s) => CliError::Engine(EngineError::Strategy(s)),
        }
    }
}

impl From<ReplayError> for CliError {
    fn from(e: ReplayError) -> Self {
        CliError::Journal(JournalError::Replay(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::RunDirNotEmpty(_) | CliError::Trigger(_) => EXIT_CONFIG,
            CliError::MissingJournal(_) | CliError::Journal(_) => EXIT_CORRUPT,
            CliError::Backend(BackendError::Io(_)) => EXIT_IO,
            CliError::Backend(_) => EXIT_CORRUPT,
            CliError::Engine(e) => match e {
                EngineError::Journal(JournalError::Io { .. }) => EXIT_IO,
                EngineError::Journal(_) | EngineError::Replay(_) | EngineError::Graph(_) => EXIT_CORRUPT,
                EngineError::ConfigMismatch { .. }
                | EngineError::InvalidPlan { .. }
                | EngineError::AlreadyStarted
                | EngineError::Config(_) => EXIT_CONFIG,
                EngineError::Strategy(_) => EXIT_CORRUPT,
            },
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::RunDirNotEmpty(_) => "run_dir_not_empty",
            CliError::MissingJournal(_) => "missing_journal",
            CliError::Journal(_) => "corrupt_journal",
            CliError::Engine(EngineError::ConfigMismatch { .. }) => "config_mismatch",
            CliError::Engine(_) => "engine",
            CliError::Trigger(_) => "trigger",
            CliError::Backend(_) => "backend",
            CliError::Io { .. } => "io",
        }
    }

    /// Machine-readable error record, printed as one JSON line on failure.
    pub fn record(&self) -> ErrorRecord {
        ErrorRecord { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

/// Exit status for a finished verb that produced `report`.
pub fn report_exit_code(report: &Report) -> i32 {
    match report.status {
        ReportStatus::NoValidNode => EXIT_NO_VALID_NODE,
        ReportStatus::Ok | ReportStatus::InProgress => EXIT_OK,
    }
}

fn journal_path(run_dir: &Path) -> PathBuf {
    run_dir.join(JOURNAL_FILE)
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|source| CliError::Io { path, source })
}

fn is_empty_dir(dir: &Path) -> Result<bool, CliError> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(source) => Err(CliError::Io { path: dir.to_path_buf(), source }),
    }
}

/// Writes `report.json`, `report.txt` and `tree.txt` next to the journal.
pub fn write_artifacts(run_dir: &Path, events: &[JournalEvent]) -> Result<Report, CliError> {
    let report = build_report(events)?;
    let specs = crate::journal::JournalState::replay(events)?.started.metric_specs;
    write(run_dir.join(REPORT_JSON), &report.to_json())?;
    write(run_dir.join(REPORT_TEXT), &report.to_text(&specs))?;
    write(run_dir.join(TREE_TEXT), &cmd_tree_events(events)?)?;
    Ok(report)
}

/// `run`: a fresh run in an empty or absent `run_dir`.
pub fn cmd_run(config: &RunConfig, trigger: Option<TriggerEvent>, clock: Arc<dyn Clock>) -> Result<Report, CliError> {
    let dir = &config.run_dir;
    if !is_empty_dir(dir)? {
        return Err(CliError::RunDirNotEmpty(dir.clone()));
    }
    let engine = Evolution::new(config.engine_config()?, config.operators()?, config.sandbox())?;
    let mut journal = Journal::create(journal_path(dir), clock)?;
    write(dir.join(CONFIG_SNAPSHOT), &config.to_toml())?;
    engine.run(&mut journal, trigger)?;
    write_artifacts(dir, journal.events())
}

/// `resume`: continues the run in `config.run_dir`.
pub fn cmd_resume(config: &RunConfig, allow_config_mismatch: bool, clock: Arc<dyn Clock>) -> Result<Report, CliError> {
    let dir = &config.run_dir;
    let path = journal_path(dir);
    if !path.is_file() {
        return Err(CliError::MissingJournal(path));
    }
    let engine = Evolution::new(config.engine_config()?, config.operators()?, config.sandbox())?;
    let mut journal = Journal::open(path, clock)?;
    engine.resume(&mut journal, allow_config_mismatch)?;
    write_artifacts(dir, journal.events())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerCheck {
    pub fired: bool,
    pub trigger: Option<TriggerEvent>,
    pub message: Option<String>,
}

/// `check-triggers`: evaluates an indicator file at `now`.
pub fn cmd_check_triggers(indicator: &Path, now: DateTime<Utc>) -> Result<TriggerCheck, CliError> {
    let file = IndicatorFile::load(indicator)?;
    let trigger = file.evaluate(now);
    Ok(TriggerCheck { fired: trigger.is_some(), message: trigger.as_ref().map(ToString::to_string), trigger })
}

fn load_events(run_dir: &Path) -> Result<Vec<JournalEvent>, CliError> {
    let path = journal_path(run_dir);
    if !path.is_file() {
        return Err(CliError::MissingJournal(path));
    }
    Ok(read_journal(&path)?)
}

fn cmd_tree_events(events: &[JournalEvent]) -> Result<String, CliError> {
    let st = crate::journal::JournalState::replay(events)?;
    Ok(render_tree(&st.graph, &st.started.metric_specs))
}

/// `tree`: the evolution tree of the run in `run_dir`.
pub fn cmd_tree(run_dir: &Path) -> Result<String, CliError> {
    cmd_tree_events(&load_events(run_dir)?)
}

/// `report`: the report of the run in `run_dir`. Also returns the plain
/// text form.
pub fn cmd_report(run_dir: &Path) -> Result<(Report, String), CliError> {
    let events = load_events(run_dir)?;
    let report = build_report(&events)?;
    let specs = crate::journal::JournalState::replay(&events)?.started.metric_specs;
    let text = report.to_text(&specs);
    Ok((report, text))
}

/// `replay-record`: converts a recordings directory into a playback table.
pub fn cmd_replay_record(recordings: &Path, table: &Path) -> Result<usize, CliError> {
    Ok(build_playback_table(recordings, table)?)
}
