//! Validator and Executor for candidate code.
//!
//! Each node gets its own workspace `<run_dir>/nodes/<id>/` holding
//! `solution.src`, `stdout.log`, `stderr.log` and `outcome.meta` (JSON) for
//! the most recent run. Children see `SEPDD_DATA_DIR` when configured and
//! `SEPDD_DEBUG=1` during validation runs only.

mod metrics;
mod process;
mod scripted;

pub use metrics::{extract_metrics, MetricExtraction, MetricPattern, METRIC_MARKER};
pub use process::{CommandTemplate, ProcessSandbox};
pub use scripted::{ScriptedExit, ScriptedRun, ScriptedSandbox};

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MetricMap, NodeId};

pub const DEBUG_ENV: &str = "SEPDD_DEBUG";
pub const DATA_DIR_ENV: &str = "SEPDD_DATA_DIR";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("workspace {path}: {source}")]
    Workspace { path: PathBuf, source: std::io::Error },
    #[error("workspace {0} escapes the run directory")]
    Containment(PathBuf),
    #[error("failed to spawn {program}: {message}")]
    Spawn { program: String, message: String },
    #[error("scripted sandbox has no entry for this code (fingerprint {0})")]
    UnknownScript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Debug,
    Full,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Debug => "debug",
            RunMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    /// Process exit code; death by signal N is reported as 128 + N.
    Code(i32),
    Timeout,
    SpawnFailure(String),
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Code(c) => write!(f, "exit {c}"),
            ExitStatus::Timeout => f.write_str("timeout"),
            ExitStatus::SpawnFailure(m) => write!(f, "spawn failure: {m}"),
        }
    }
}

/// Captured result of one run of candidate code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub mode: RunMode,
    pub exit: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stdout_truncated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stderr_truncated: bool,
    pub wall_seconds: f64,
    /// Metrics parsed from `stdout` by [`extract_metrics`].
    pub metrics: MetricMap,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExecOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit == ExitStatus::Code(0)
    }

    /// Short human-readable digest used in prompts.
    pub fn summary(&self, tail_lines: usize) -> String {
        let mut s = format!("{} run: {} after {:.1}s", self.mode, self.exit, self.wall_seconds);
        if !self.metrics.is_empty() {
            let m: Vec<String> = self.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(&format!("; metrics {}", m.join(", ")));
        }
        for (label, text, truncated) in
            [("stdout", &self.stdout, self.stdout_truncated), ("stderr", &self.stderr, self.stderr_truncated)]
        {
            let tail = tail_of(text, tail_lines);
            if !tail.is_empty() {
                s.push_str(&format!("\n{label} (last lines{}):\n{tail}", if truncated { ", truncated" } else { "" }));
            }
        }
        s
    }
}

fn tail_of(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: Option<u32>,
    pub message: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl SyntaxReport {
    pub fn clean() -> Self {
        Self { ok: true, diagnostics: Vec::new() }
    }

    pub fn from_diagnostics(diagnostics: Vec<Diagnostic>) -> Self {
        let ok = !diagnostics.iter().any(|d| d.severity == Severity::Error);
        Self { ok, diagnostics }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self::from_diagnostics(vec![Diagnostic { line: None, message: message.into(), severity: Severity::Error }])
    }

    pub fn summary(&self) -> String {
        if self.diagnostics.is_empty() {
            return "no diagnostics".to_string();
        }
        self.diagnostics
            .iter()
            .map(|d| match d.line {
                Some(l) => format!("{:?} line {l}: {}", d.severity, d.message),
                None => format!("{:?}: {}", d.severity, d.message),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Result of the Validator: the static check, then (when it passed) a
/// debug-mode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub syntax: SyntaxReport,
    pub exec: Option<ExecOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecLimits {
    pub full_timeout_secs: f64,
    pub debug_timeout_secs: f64,
    pub max_captured_bytes: usize,
    /// Time between SIGTERM and SIGKILL when a run overstays its limit.
    #[serde(default = "default_grace")]
    pub kill_grace_secs: f64,
}

fn default_grace() -> f64 {
    0.2
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            full_timeout_secs: 3600.0,
            debug_timeout_secs: 300.0,
            max_captured_bytes: 64 * 1024,
            kill_grace_secs: 0.2,
        }
    }
}

impl ExecLimits {
    pub fn check(&self) -> Result<(), String> {
        if !(self.full_timeout_secs > 0.0 && self.debug_timeout_secs > 0.0) {
            return Err("timeouts must be positive".into());
        }
        if self.debug_timeout_secs > self.full_timeout_secs {
            return Err("debug_timeout_secs must not exceed full_timeout_secs".into());
        }
        if self.kill_grace_secs < 0.0 {
            return Err("kill_grace_secs must be non-negative".into());
        }
        Ok(())
    }

    pub fn timeout(&self, mode: RunMode) -> Duration {
        Duration::from_secs_f64(match mode {
            RunMode::Debug => self.debug_timeout_secs,
            RunMode::Full => self.full_timeout_secs,
        })
    }

    pub fn kill_grace(&self) -> Duration {
        Duration::from_secs_f64(self.kill_grace_secs)
    }
}

/// Runs candidate code on behalf of a node.
pub trait Sandbox: Send + Sync {
    /// Static check followed by a debug-mode run when the check passes.
    fn validate(&self, node: NodeId, code: &str) -> Result<Validation, SandboxError>;

    /// Full-mode run.
    fn execute(&self, node: NodeId, code: &str) -> Result<ExecOutcome, SandboxError>;
}
