use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    extract_metrics, Diagnostic, ExecLimits, ExecOutcome, ExitStatus, MetricPattern, RunMode, Sandbox, SandboxError,
    Severity, SyntaxReport, Validation, DATA_DIR_ENV, DEBUG_ENV,
};
use crate::model::NodeId;

pub const SOLUTION_FILE: &str = "solution.src";
const POLL_INTERVAL: Duration = Duration::from_millis(5);

/// An argv template; every `{file}` is replaced with the solution path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandTemplate(pub Vec<String>);

impl CommandTemplate {
    pub fn new<S: Into<String>>(argv: impl IntoIterator<Item = S>) -> Self {
        Self(argv.into_iter().map(Into::into).collect())
    }

    /// Whitespace-separated form, e.g. `"python3 {file}"`.
    pub fn parse(s: &str) -> Self {
        Self(s.split_whitespace().map(str::to_string).collect())
    }

    pub fn render(&self, file: &Path) -> Vec<String> {
        let f = file.to_string_lossy();
        self.0.iter().map(|a| a.replace("{file}", &f)).collect()
    }
}

/// Sandbox that runs candidates as child processes in per-node workspaces.
///
/// Each child leads its own process group; on timeout the group receives
/// SIGTERM, then SIGKILL after the grace period. Whatever is left of the
/// group is killed once the main child exits, so background jobs cannot
/// outlive the run.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    run_dir: PathBuf,
    limits: ExecLimits,
    interpreter: CommandTemplate,
    checker: Option<CommandTemplate>,
    data_dir: Option<PathBuf>,
    metric_patterns: Vec<MetricPattern>,
}

struct ChildResult {
    exit: ExitStatus,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    stdout_truncated: bool,
    stderr_truncated: bool,
    wall: Duration,
}

impl ProcessSandbox {
    pub fn new(run_dir: impl Into<PathBuf>, limits: ExecLimits, interpreter: CommandTemplate) -> Self {
        Self {
            run_dir: run_dir.into(),
            limits,
            interpreter,
            checker: None,
            data_dir: None,
            metric_patterns: Vec::new(),
        }
    }

    pub fn with_checker(mut self, checker: CommandTemplate) -> Self {
        self.checker = Some(checker);
        self
    }

    pub fn with_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = Some(dir.into());
        self
    }

    pub fn with_metric_patterns(mut self, patterns: Vec<MetricPattern>) -> Self {
        self.metric_patterns = patterns;
        self
    }

    pub fn limits(&self) -> &ExecLimits {
        &self.limits
    }

    pub fn workspace(&self, node: NodeId) -> PathBuf {
        self.run_dir.join("nodes").join(node.to_string())
    }

    fn prepare(&self, node: NodeId, code: &str) -> Result<(PathBuf, PathBuf), SandboxError> {
        let ws = self.workspace(node);
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SandboxError::Workspace { path, source }
        };
        std::fs::create_dir_all(&ws).map_err(io(&ws))?;
        let nodes_root = self.run_dir.join("nodes").canonicalize().map_err(io(&self.run_dir))?;
        let canonical = ws.canonicalize().map_err(io(&ws))?;
        if !canonical.starts_with(&nodes_root) || canonical == nodes_root {
            return Err(SandboxError::Containment(ws));
        }
        let journal = self.run_dir.join(crate::journal::JOURNAL_FILE);
        if let Ok(j) = journal.canonicalize() {
            if j.starts_with(&canonical) {
                return Err(SandboxError::Containment(ws));
            }
        }
        let file = canonical.join(SOLUTION_FILE);
        std::fs::write(&file, code).map_err(io(&file))?;
        Ok((canonical, file))
    }

    fn run(&self, ws: &Path, file: &Path, mode: RunMode) -> Result<ExecOutcome, SandboxError> {
        let argv = self.interpreter.render(file);
        let mut env: Vec<(&str, String)> = Vec::new();
        if mode == RunMode::Debug {
            env.push((DEBUG_ENV, "1".to_string()));
        }
        if let Some(d) = &self.data_dir {
            env.push((DATA_DIR_ENV, d.to_string_lossy().into_owned()));
        }
        let res = run_child(
            &argv,
            ws,
            &env,
            self.limits.timeout(mode),
            self.limits.kill_grace(),
            self.limits.max_captured_bytes,
        );
        let stdout = String::from_utf8_lossy(&res.stdout).into_owned();
        let extraction = extract_metrics(&stdout, &self.metric_patterns);
        let outcome = ExecOutcome {
            mode,
            exit: res.exit,
            stdout,
            stderr: String::from_utf8_lossy(&res.stderr).into_owned(),
            stdout_truncated: res.stdout_truncated,
            stderr_truncated: res.stderr_truncated,
            wall_seconds: res.wall.as_secs_f64(),
            metrics: extraction.metrics,
            warnings: extraction.warnings,
        };
        write_logs(ws, &outcome)?;
        Ok(outcome)
    }

    fn check(&self, ws: &Path, file: &Path) -> Result<SyntaxReport, SandboxError> {
        let Some(checker) = &self.checker else {
            return Ok(SyntaxReport::clean());
        };
        let argv = checker.render(file);
        let res = run_child(
            &argv,
            ws,
            &[],
            self.limits.timeout(RunMode::Debug),
            self.limits.kill_grace(),
            self.limits.max_captured_bytes,
        );
        match res.exit {
            ExitStatus::Code(0) => Ok(SyntaxReport::clean()),
            ExitStatus::Code(code) => {
                let mut text = String::from_utf8_lossy(&res.stdout).into_owned();
                text.push_str(&String::from_utf8_lossy(&res.stderr));
                let mut diags = parse_diagnostics(&text);
                if !diags.iter().any(|d| d.severity == Severity::Error) {
                    let msg = text.trim();
                    diags.push(Diagnostic {
                        line: None,
                        message: if msg.is_empty() { format!("checker exited with {code}") } else { msg.to_string() },
                        severity: Severity::Error,
                    });
                }
                Ok(SyntaxReport::from_diagnostics(diags))
            }
            ExitStatus::Timeout => Ok(SyntaxReport::error("static checker timed out")),
            ExitStatus::SpawnFailure(message) => Err(SandboxError::Spawn { program: argv[0].clone(), message }),
        }
    }
}

impl Sandbox for ProcessSandbox {
    fn validate(&self, node: NodeId, code: &str) -> Result<Validation, SandboxError> {
        let (ws, file) = self.prepare(node, code)?;
        let syntax = self.check(&ws, &file)?;
        if !syntax.ok {
            return Ok(Validation { syntax, exec: None });
        }
        let exec = self.run(&ws, &file, RunMode::Debug)?;
        Ok(Validation { syntax, exec: Some(exec) })
    }

    fn execute(&self, node: NodeId, code: &str) -> Result<ExecOutcome, SandboxError> {
        let (ws, file) = self.prepare(node, code)?;
        self.run(&ws, &file, RunMode::Full)
    }
}

fn write_logs(ws: &Path, outcome: &ExecOutcome) -> Result<(), SandboxError> {
    let write = |name: &str, data: &[u8]| {
        let path = ws.join(name);
        std::fs::write(&path, data).map_err(|source| SandboxError::Workspace { path, source })
    };
    write("stdout.log", outcome.stdout.as_bytes())?;
    write("stderr.log", outcome.stderr.as_bytes())?;
    let meta = serde_json::json!({
        "mode": outcome.mode,
        "exit": outcome.exit,
        "wall_seconds": outcome.wall_seconds,
        "stdout_truncated": outcome.stdout_truncated,
        "stderr_truncated": outcome.stderr_truncated,
        "metrics": outcome.metrics,
        "warnings": outcome.warnings,
    });
    write("outcome.meta", serde_json::to_string_pretty(&meta).expect("json value").as_bytes())
}

fn parse_diagnostics(text: &str) -> Vec<Diagnostic> {
    static COLON: OnceLock<Regex> = OnceLock::new();
    static PY: OnceLock<Regex> = OnceLock::new();
    let colon = COLON.get_or_init(|| Regex::new(r"^[^:\s]+:(\d+)(?::\d+)?:\s*(.+)$").unwrap());
    let py = PY.get_or_init(|| Regex::new(r#"line (\d+)"#).unwrap());
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if let Some(c) = colon.captures(line.trim()) {
            let message = c[2].trim().to_string();
            let severity =
                if message.to_ascii_lowercase().starts_with("warning") { Severity::Warning } else { Severity::Error };
            out.push(Diagnostic { line: c[1].parse().ok(), message, severity });
        } else if line.trim_start().starts_with("File ") {
            if let Some(c) = py.captures(line) {
                let message = lines[i + 1..]
                    .iter()
                    .map(|l| l.trim())
                    .find(|l| l.contains("Error"))
                    .unwrap_or("error")
                    .to_string();
                out.push(Diagnostic { line: c[1].parse().ok(), message, severity: Severity::Error });
            }
        }
    }
    out
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R, limit: usize) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = limit.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    })
}

fn kill_group(pgid: i32, signal: i32) {
    // SAFETY: killpg has no memory-safety preconditions; a stale group id
    // only yields ESRCH.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

fn run_child(
    argv: &[String],
    cwd: &Path,
    env: &[(&str, String)],
    timeout: Duration,
    grace: Duration,
    max_bytes: usize,
) -> ChildResult {
    let started = Instant::now();
    let failed = |msg: String| ChildResult {
        exit: ExitStatus::SpawnFailure(msg),
        stdout: Vec::new(),
        stderr: Vec::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        wall: started.elapsed(),
    };
    let Some((program, args)) = argv.split_first() else {
        return failed("empty command".into());
    };
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env_remove(DEBUG_ENV)
        .process_group(0);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return failed(format!("{program}: {e}")),
    };
    let pgid = child.id() as i32;
    let out = spawn_reader(child.stdout.take().expect("piped"), max_bytes);
    let err = spawn_reader(child.stderr.take().expect("piped"), max_bytes);

    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {}
            Err(_) => break None,
        }
        if started.elapsed() >= timeout {
            timed_out = true;
            kill_group(pgid, libc::SIGTERM);
            let deadline = Instant::now() + grace;
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    break;
                }
                thread::sleep(POLL_INTERVAL);
            }
            kill_group(pgid, libc::SIGKILL);
            break child.wait().ok();
        }
        thread::sleep(POLL_INTERVAL);
    };
    let wall = started.elapsed();
    kill_group(pgid, libc::SIGKILL);
    let (stdout, stdout_truncated) = out.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err.join().unwrap_or_default();

    let exit = if timed_out {
        ExitStatus::Timeout
    } else {
        match status {
            Some(s) => {
                use std::os::unix::process::ExitStatusExt;
                match (s.code(), s.signal()) {
                    (Some(c), _) => ExitStatus::Code(c),
                    (None, Some(sig)) => ExitStatus::Code(128 + sig),
                    (None, None) => ExitStatus::Code(-1),
                }
            }
            None => ExitStatus::Code(-1),
        }
    };
    ChildResult { exit, stdout, stderr, stdout_truncated, stderr_truncated, wall }
}
