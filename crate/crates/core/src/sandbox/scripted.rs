use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{extract_metrics, ExecOutcome, ExitStatus, RunMode, Sandbox, SandboxError, SyntaxReport, Validation};
use crate::model::NodeId;

/// Scripted behaviour of one exact piece of code.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedRun {
    pub syntax_error: Option<String>,
    pub debug: ScriptedExit,
    pub full: ScriptedExit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedExit {
    pub exit: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub wall_seconds: f64,
}

impl ScriptedExit {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self { exit: ExitStatus::Code(0), stdout: stdout.into(), stderr: String::new(), wall_seconds: 1.0 }
    }

    pub fn failed(code: i32, stderr: impl Into<String>) -> Self {
        Self { exit: ExitStatus::Code(code), stdout: String::new(), stderr: stderr.into(), wall_seconds: 1.0 }
    }

    pub fn timeout() -> Self {
        Self { exit: ExitStatus::Timeout, stdout: String::new(), stderr: String::new(), wall_seconds: 1.0 }
    }
}

impl ScriptedRun {
    /// Both runs exit 0 printing `stdout`.
    pub fn succeed(stdout: impl Into<String>) -> Self {
        let out = stdout.into();
        Self { syntax_error: None, debug: ScriptedExit::ok(out.clone()), full: ScriptedExit::ok(out) }
    }

    /// Passes validation, crashes in the full run.
    pub fn crash_full(debug_stdout: impl Into<String>, stderr: impl Into<String>) -> Self {
        Self { syntax_error: None, debug: ScriptedExit::ok(debug_stdout), full: ScriptedExit::failed(1, stderr) }
    }

    pub fn crash_debug(stderr: impl Into<String>) -> Self {
        Self { syntax_error: None, debug: ScriptedExit::failed(1, stderr), full: ScriptedExit::failed(1, "") }
    }

    pub fn syntax(message: impl Into<String>) -> Self {
        Self {
            syntax_error: Some(message.into()),
            debug: ScriptedExit::failed(1, ""),
            full: ScriptedExit::failed(1, ""),
        }
    }

    fn outcome(&self, mode: RunMode) -> ExecOutcome {
        let s = match mode {
            RunMode::Debug => &self.debug,
            RunMode::Full => &self.full,
        };
        let extraction = extract_metrics(&s.stdout, &[]);
        ExecOutcome {
            mode,
            exit: s.exit.clone(),
            stdout: s.stdout.clone(),
            stderr: s.stderr.clone(),
            stdout_truncated: false,
            stderr_truncated: false,
            wall_seconds: s.wall_seconds,
            metrics: extraction.metrics,
            warnings: extraction.warnings,
        }
    }
}

type Script = dyn Fn(&str) -> Option<ScriptedRun> + Send + Sync;

/// In-process sandbox whose outcomes are looked up from the code text.
/// Unknown code is an error rather than a silent default.
#[derive(Clone)]
pub struct ScriptedSandbox {
    script: Arc<Script>,
    validations: Arc<AtomicUsize>,
    executions: Arc<AtomicUsize>,
}

impl std::fmt::Debug for ScriptedSandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedSandbox")
            .field("validations", &self.validations.load(Ordering::Relaxed))
            .field("executions", &self.executions.load(Ordering::Relaxed))
            .finish()
    }
}

impl ScriptedSandbox {
    pub fn from_table(table: HashMap<String, ScriptedRun>) -> Self {
        Self::from_fn(move |code| table.get(code).cloned())
    }

    pub fn from_fn(f: impl Fn(&str) -> Option<ScriptedRun> + Send + Sync + 'static) -> Self {
        Self { script: Arc::new(f), validations: Arc::default(), executions: Arc::default() }
    }

    pub fn validations(&self) -> usize {
        self.validations.load(Ordering::Relaxed)
    }

    pub fn executions(&self) -> usize {
        self.executions.load(Ordering::Relaxed)
    }

    fn lookup(&self, code: &str) -> Result<ScriptedRun, SandboxError> {
        (self.script)(code).ok_or_else(|| {
            let digest = Sha256::digest(code.as_bytes());
            SandboxError::UnknownScript(hex::encode(&digest[..8]))
        })
    }
}

impl Sandbox for ScriptedSandbox {
    fn validate(&self, _node: NodeId, code: &str) -> Result<Validation, SandboxError> {
        self.validations.fetch_add(1, Ordering::Relaxed);
        let run = self.lookup(code)?;
        if let Some(msg) = &run.syntax_error {
            return Ok(Validation { syntax: SyntaxReport::error(msg.clone()), exec: None });
        }
        Ok(Validation { syntax: SyntaxReport::clean(), exec: Some(run.outcome(RunMode::Debug)) })
    }

    fn execute(&self, _node: NodeId, code: &str) -> Result<ExecOutcome, SandboxError> {
        self.executions.fetch_add(1, Ordering::Relaxed);
        Ok(self.lookup(code)?.outcome(RunMode::Full))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookup_and_unknown_code() {
        let mut t = HashMap::new();
        t.insert("good".to_string(), ScriptedRun::succeed("SEPDD_METRIC mAP50=0.5\n"));
        t.insert("bad".to_string(), ScriptedRun::syntax("unexpected indent"));
        let sb = ScriptedSandbox::from_table(t);
        let v = sb.validate(NodeId(1), "good").unwrap();
        assert!(v.syntax.ok);
        assert_eq!(v.exec.unwrap().mode, RunMode::Debug);
        let full = sb.execute(NodeId(1), "good").unwrap();
        assert_eq!(full.metrics["mAP50"], 0.5);
        let bad = sb.validate(NodeId(1), "bad").unwrap();
        assert!(!bad.syntax.ok && bad.exec.is_none());
        assert!(matches!(sb.execute(NodeId(1), "other"), Err(SandboxError::UnknownScript(_))));
        assert_eq!(sb.validations(), 2);
        assert_eq!(sb.executions(), 2);
    }
}
