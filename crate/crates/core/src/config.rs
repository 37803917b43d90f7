//! Run configuration: a TOML document plus `--set key=value` overrides.
//!
//! ```toml
//! run_dir = "runs/ef"
//! fixture = "ef"            # or: playback = "table/", or a [gateway] table
//!
//! [task]
//! description = { file = "task.md" }
//! data_description = "YOLO boxes under SEPDD_DATA_DIR"
//! requirements = "Report mAP50 and mAP50-95."
//!
//! [budget]
//! max_nodes = 18
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Every key and its default is listed in the README.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineConfig, ExpansionPolicy, RunBudget, TaskSpec};
use crate::fixtures;
use crate::gateway::{GatewayClient, GatewayConfig, SecretString};
use crate::model::{Baseline, MetricSpecs, NodeId};
use crate::operators::{BackendError, CompletionBackend, Operators, PlaybackBackend, RecordingBackend, SamplingParams};
use crate::sandbox::{CommandTemplate, ExecLimits, MetricPattern, ProcessSandbox, Sandbox};
use crate::strategy::{Expansion, StrategyConfig};

pub const RECORDINGS_DIR: &str = "recordings";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
}

/// Text given inline or read from a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextSource {
    Inline(String),
    File { file: PathBuf },
}

impl Default for TextSource {
    fn default() -> Self {
        TextSource::Inline(String::new())
    }
}

impl TextSource {
    pub fn resolve(&self) -> Result<String, ConfigError> {
        match self {
            TextSource::Inline(s) => Ok(s.clone()),
            TextSource::File { file } => {
                fs::read_to_string(file).map_err(|e| ConfigError::Read { path: file.clone(), message: e.to_string() })
            }
        }
    }

    fn rebase(&mut self, base: &Path) {
        if let TextSource::File { file } = self {
            *file = rebase(base, file);
        }
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub description: TextSource,
    #[serde(default)]
    pub data_description: TextSource,
    pub requirements: TextSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    /// Command template that runs a candidate; `{file}` is the program path.
    pub interpreter: String,
    /// Static checker template; exit status 0 means the program is clean.
    pub checker: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub metric_patterns: Vec<MetricPattern>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: "python3 {file}".into(),
            checker: Some("python3 -m py_compile {file}".into()),
            data_dir: None,
            metric_patterns: Vec::new(),
        }
    }
}

/// Built-in scripted backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    /// Replay of the recorded EF industrial run.
    Ef,
    /// Seeded synthetic run without faults.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub metrics: MetricSpecs,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub budget: RunBudget,
    #[serde(default)]
    pub limits: ExecLimits,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub gateway: Option<GatewayConfig>,
    #[serde(default)]
    pub playback: Option<PathBuf>,
    #[serde(default)]
    pub fixture: Option<FixtureKind>,
    /// Record every exchange under `<run_dir>/recordings/`.
    #[serde(default)]
    pub record: bool,
    /// JSON map from node id to expansion; switches to scripted expansion.
    #[serde(default)]
    pub expansion_plan: Option<PathBuf>,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default = "default_summary_limit")]
    pub summary_limit: usize,
}

fn default_summary_limit() -> usize {
    5
}

/// Sets `dotted.key` in a TOML table. The value is parsed as TOML and kept
/// as a plain string when it does not parse.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::BadOverride(assignment.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(assignment.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a config document. `base` resolves relative paths.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn rebase(&mut self, base: &Path) {
        self.run_dir = rebase(base, &self.run_dir);
        self.task.description.rebase(base);
        self.task.data_description.rebase(base);
        self.task.requirements.rebase(base);
        for p in [&mut self.playback, &mut self.expansion_plan, &mut self.sandbox.data_dir].into_iter().flatten() {
            *p = rebase(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sources = [self.gateway.is_some(), self.playback.is_some(), self.fixture.is_some()];
        match sources.iter().filter(|s| **s).count() {
            1 => {}
            0 => {
                return Err(ConfigError::Invalid("no backend configured: set one of gateway, playback, fixture".into()))
            }
            _ => {
                return Err(ConfigError::Invalid(
                    "more than one backend configured: set exactly one of gateway, playback, fixture".into(),
                ))
            }
        }
        let invalid = ConfigError::Invalid;
        self.strategy.check().map_err(invalid)?;
        self.budget.check().map_err(invalid)?;
        self.limits.check().map_err(invalid)?;
        if let Some(g) = &self.gateway {
            g.check().map_err(invalid)?;
        }
        if self.sandbox.interpreter.trim().is_empty() {
            return Err(ConfigError::Invalid("sandbox.interpreter is empty".into()));
        }
        for t in [&self.task.description, &self.task.data_description, &self.task.requirements] {
            if let TextSource::File { file } = t {
                if !file.is_file() {
                    return Err(ConfigError::MissingFile(file.clone()));
                }
            }
        }
        for p in [&self.playback, &self.sandbox.data_dir].into_iter().flatten() {
            if !p.is_dir() {
                return Err(ConfigError::MissingFile(p.clone()));
            }
        }
        if let Some(p) = &self.expansion_plan {
            if !p.is_file() {
                return Err(ConfigError::MissingFile(p.clone()));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, ConfigError> {
        Ok(TaskSpec {
            description: self.task.description.resolve()?,
            data_description: self.task.data_description.resolve()?,
            requirements: self.task.requirements.resolve()?,
        })
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            self.run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
        })
    }

    fn policy(&self) -> Result<ExpansionPolicy, ConfigError> {
        if let Some(p) = &self.expansion_plan {
            let text =
                fs::read_to_string(p).map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
            let plan: BTreeMap<NodeId, Expansion> =
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?;
            return Ok(ExpansionPolicy::Scripted(plan));
        }
        Ok(match self.fixture {
            Some(FixtureKind::Ef) => ExpansionPolicy::Scripted(fixtures::ef::ef_plan()),
            _ => ExpansionPolicy::TopK,
        })
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        let mut c = EngineConfig::new(self.run_id(), self.task_spec()?);
        c.metric_specs = self.metrics.clone();
        c.strategy = self.strategy.clone();
        c.budget = self.budget.clone();
        c.policy = self.policy()?;
        c.baseline = self.baseline.clone();
        c.summary_limit = self.summary_limit;
        c.check().map_err(ConfigError::Invalid)?;
        Ok(c)
    }

    /// The configured completion backend, wrapped in a recorder when
    /// `record` is set. The gateway key comes from `SEPDD_API_KEY`.
    pub fn backend(&self) -> Result<Arc<dyn CompletionBackend>, ConfigError> {
        let inner: Arc<dyn CompletionBackend> = if let Some(g) = &self.gateway {
            let mut g = g.clone();
            g.api_key = SecretString::from_env().unwrap_or_default();
            Arc::new(GatewayClient::new(g)?)
        } else if let Some(p) = &self.playback {
            Arc::new(PlaybackBackend::load(p)?)
        } else {
            match self.fixture {
                Some(FixtureKind::Ef) => Arc::new(fixtures::ef::ef_backend()),
                Some(FixtureKind::Synthetic) => {
                    Arc::new(fixtures::synthetic::synthetic_backend(self.seed, fixtures::synthetic::FaultPlan::none()))
                }
                None => return Err(ConfigError::Invalid("no backend configured".into())),
            }
        };
        if self.record {
            return Ok(Arc::new(RecordingBackend::new(inner, self.run_dir.join(RECORDINGS_DIR))?));
        }
        Ok(inner)
    }

    pub fn operators(&self) -> Result<Operators, ConfigError> {
        let routing = self.gateway.as_ref().map(|g| g.model_map.clone()).unwrap_or_default();
        Ok(Operators::new(self.backend()?, routing, self.sampling.clone()))
    }

    pub fn sandbox(&self) -> Arc<dyn Sandbox> {
        let mut sb =
            ProcessSandbox::new(&self.run_dir, self.limits.clone(), CommandTemplate::parse(&self.sandbox.interpreter))
                .with_metric_patterns(self.sandbox.metric_patterns.clone());
        if let Some(c) = &self.sandbox.checker {
            sb = sb.with_checker(CommandTemplate::parse(c));
        }
        if let Some(d) = &self.sandbox.data_dir {
            sb = sb.with_data_dir(d);
        }
        Arc::new(sb)
    }
}
