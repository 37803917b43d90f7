//! The LLM-powered operators: Idea Generator, Code Creator, Analyzer, Code
//! Refiner, and the merge analysis module.
//!
//! Operators are stateless. Each completion they issue is reported to the
//! caller as a [`CallRecord`] so token usage can be attributed to the node
//! being built.

pub mod backend;
pub mod parse;
pub mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    build_playback_table, fingerprint, BackendError, BackendKind, Completion, CompletionBackend, CompletionRequest,
    Message, PlaybackBackend, RecordingBackend, Role, SamplingParams, ScriptedBackend,
};
pub use parse::{CandidateAnalysis, Suggestion, Suggestions};

use crate::model::{MetricMap, Node, NodeId, TokenUsage};
use crate::sandbox::{ExecOutcome, ExitStatus, SyntaxReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    IdeaGenerator,
    CodeCreator,
    Analyzer,
    CodeRefiner,
    MergeAnalysis,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 5] = [
        OperatorKind::IdeaGenerator,
        OperatorKind::CodeCreator,
        OperatorKind::Analyzer,
        OperatorKind::CodeRefiner,
        OperatorKind::MergeAnalysis,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OperatorKind::IdeaGenerator => "idea_generator",
            OperatorKind::CodeCreator => "code_creator",
            OperatorKind::Analyzer => "analyzer",
            OperatorKind::CodeRefiner => "code_refiner",
            OperatorKind::MergeAnalysis => "merge_analysis",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("completion could not be parsed as a list of suggestions")]
    UnparsableSuggestions,
    #[error("completion contains no code block")]
    NoCodeBlock,
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl OperatorError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, OperatorError::Backend(e) if e.is_fatal())
    }
}

/// Summary of another solution shown to the Idea Generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalSummary {
    pub node: NodeId,
    pub metrics: String,
    pub strategy_summary: String,
    pub strengths: String,
    pub weaknesses: String,
}

/// Everything an operator prompt is rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorContext {
    pub task_description: String,
    pub data_description: String,
    pub task_requirements: String,
    pub primary_metric: String,
    /// The node being built, e.g. `node 12 (improve, parent 10)`.
    pub node: Option<NodeId>,
    pub expansion_note: String,
    pub trigger_note: Option<String>,
    pub parent_code: Option<String>,
    pub parent_exec_summary: Option<String>,
    pub parent_strategies: Option<String>,
    /// Best-first, already truncated.
    pub journal_summaries: Vec<JournalSummary>,
    pub output_format: String,
}

impl OperatorContext {
    pub fn new(task_description: impl Into<String>, task_requirements: impl Into<String>) -> Self {
        Self {
            task_description: task_description.into(),
            data_description: String::new(),
            task_requirements: task_requirements.into(),
            primary_metric: "mAP50".into(),
            node: None,
            expansion_note: "initial draft".into(),
            trigger_note: None,
            parent_code: None,
            parent_exec_summary: None,
            parent_strategies: None,
            journal_summaries: Vec::new(),
            output_format: prompt::IDEA_OUTPUT_FORMAT.into(),
        }
    }

    pub fn check(&self) -> Result<(), OperatorError> {
        if self.task_description.trim().is_empty() {
            return Err(OperatorError::Precondition("task description is empty".into()));
        }
        if self.task_requirements.trim().is_empty() {
            return Err(OperatorError::Precondition("task requirements are empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreatorMode {
    Initial,
    Improvement,
    Merge,
}

impl CreatorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CreatorMode::Initial => "initial generation",
            CreatorMode::Improvement => "improvement",
            CreatorMode::Merge => "merge",
        }
    }
}

/// A failed debug attempt handed to later refiner calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorAttempt {
    pub code: String,
    pub analysis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum BugReason {
    SyntaxError,
    NoExecution,
    NonZeroExit(i32),
    Timeout,
    SpawnFailure,
    MissingPrimaryMetric,
    /// Deterministic checks passed but the analyzer model judged the run
    /// broken.
    AnalyzerFlagged,
}

impl fmt::Display for BugReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BugReason::SyntaxError => f.write_str("static check failed"),
            BugReason::NoExecution => f.write_str("no execution output"),
            BugReason::NonZeroExit(c) => write!(f, "process exited with {c}"),
            BugReason::Timeout => f.write_str("run timed out"),
            BugReason::SpawnFailure => f.write_str("process could not be started"),
            BugReason::MissingPrimaryMetric => f.write_str("primary metric missing from stdout"),
            BugReason::AnalyzerFlagged => f.write_str("analyzer judged the run broken"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisVerdict {
    pub buggy: bool,
    pub analysis: String,
    /// Metrics parsed by the sandbox; never taken from model text.
    pub extracted_metrics: MetricMap,
    pub needs_debug_reason: Option<BugReason>,
}

/// The part of the Analyzer that needs no model: syntax, exit status and
/// presence of the primary metric.
pub fn deterministic_verdict(
    syntax: Option<&SyntaxReport>,
    exec: Option<&ExecOutcome>,
    primary_metric: &str,
) -> (Option<BugReason>, MetricMap) {
    if let Some(s) = syntax {
        if !s.ok {
            return (Some(BugReason::SyntaxError), MetricMap::new());
        }
    }
    let Some(exec) = exec else {
        return (Some(BugReason::NoExecution), MetricMap::new());
    };
    let metrics = exec.metrics.clone();
    let reason = match &exec.exit {
        ExitStatus::Timeout => Some(BugReason::Timeout),
        ExitStatus::SpawnFailure(_) => Some(BugReason::SpawnFailure),
        ExitStatus::Code(0) if !metrics.contains_key(primary_metric) => Some(BugReason::MissingPrimaryMetric),
        ExitStatus::Code(0) => None,
        ExitStatus::Code(c) => Some(BugReason::NonZeroExit(*c)),
    };
    (reason, metrics)
}

/// Model name per operator, with a fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRouting {
    pub default: String,
    #[serde(default, flatten)]
    pub overrides: BTreeMap<OperatorKind, String>,
}

impl Default for ModelRouting {
    /// Code-writing operators on a coder model, analysis on a general one.
    fn default() -> Self {
        Self {
            default: "qwen3.5-plus".into(),
            overrides: BTreeMap::from([
                (OperatorKind::CodeCreator, "qwen3-coder-plus".into()),
                (OperatorKind::CodeRefiner, "qwen3-coder-plus".into()),
            ]),
        }
    }
}

impl ModelRouting {
    pub fn model_for(&self, kind: OperatorKind) -> &str {
        self.overrides.get(&kind).unwrap_or(&self.default)
    }
}

/// One completed operator call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub operator: OperatorKind,
    pub model: String,
    pub fingerprint: String,
    pub usage: TokenUsage,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeAnalysis {
    pub merged_suggestions: Suggestions,
    pub per_candidate: Vec<CandidateAnalysis>,
}

/// The operator set bound to a completion backend.
#[derive(Clone)]
pub struct Operators {
    backend: Arc<dyn CompletionBackend>,
    models: ModelRouting,
    sampling: SamplingParams,
}

impl fmt::Debug for Operators {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Operators").field("backend", &self.backend.kind()).field("models", &self.models).finish()
    }
}

impl Operators {
    pub fn new(backend: Arc<dyn CompletionBackend>, models: ModelRouting, sampling: SamplingParams) -> Self {
        Self { backend, models, sampling }
    }

    pub fn backend(&self) -> &Arc<dyn CompletionBackend> {
        &self.backend
    }

    fn call(
        &self,
        operator: OperatorKind,
        messages: Vec<Message>,
        node: Option<NodeId>,
        attempt: u32,
        calls: &mut Vec<CallRecord>,
    ) -> Result<Completion, BackendError> {
        let request = CompletionRequest {
            operator,
            model: self.models.model_for(operator).to_string(),
            messages,
            sampling: self.sampling.clone(),
            node,
            attempt,
        };
        let completion = self.backend.complete(&request)?;
        calls.push(CallRecord {
            operator,
            model: request.model.clone(),
            fingerprint: request.fingerprint(),
            usage: completion.usage,
            warnings: completion.warnings.clone(),
        });
        Ok(completion)
    }

    /// Produces prioritized suggestions. An unparsable reply gets one retry
    /// with a format reminder.
    pub fn idea_generator(
        &self,
        ctx: &OperatorContext,
        calls: &mut Vec<CallRecord>,
    ) -> Result<Suggestions, OperatorError> {
        ctx.check()?;
        let messages = prompt::idea_messages(ctx);
        let first = self.call(OperatorKind::IdeaGenerator, messages.clone(), ctx.node, 0, calls)?;
        if let Some(s) = parse::parse_suggestions(&first.text) {
            return Ok(s);
        }
        let mut retry = messages;
        retry.push(Message::assistant(first.text));
        retry.push(Message::user(prompt::FORMAT_REMINDER));
        let second = self.call(OperatorKind::IdeaGenerator, retry, ctx.node, 0, calls)?;
        parse::parse_suggestions(&second.text).ok_or(OperatorError::UnparsableSuggestions)
    }

    /// Writes a complete program. The last fenced block of the reply wins.
    pub fn code_creator(
        &self,
        ctx: &OperatorContext,
        suggestions: &Suggestions,
        mode: CreatorMode,
        merge_candidates: &[&Node],
        calls: &mut Vec<CallRecord>,
    ) -> Result<String, OperatorError> {
        ctx.check()?;
        if mode == CreatorMode::Improvement && ctx.parent_code.is_none() {
            return Err(OperatorError::Precondition("improvement mode needs parent code".into()));
        }
        if mode == CreatorMode::Merge && merge_candidates.len() < 2 {
            return Err(OperatorError::Precondition("merge mode needs at least two candidates".into()));
        }
        let messages = prompt::creator_messages(ctx, &suggestions.render(), mode, merge_candidates);
        let reply = self.call(OperatorKind::CodeCreator, messages, ctx.node, 0, calls)?;
        parse::extract_code(&reply.text).ok_or(OperatorError::NoCodeBlock)
    }

    /// Judges a candidate. Parsed metrics and the deterministic checks are
    /// authoritative; the model adds the explanation and may flag a run that
    /// passed them. If the model call fails for a non-fatal reason the
    /// verdict stands on the deterministic signals alone.
    pub fn analyzer(
        &self,
        ctx: &OperatorContext,
        code: &str,
        syntax: Option<&SyntaxReport>,
        exec: Option<&ExecOutcome>,
        attempt: u32,
        calls: &mut Vec<CallRecord>,
    ) -> Result<AnalysisVerdict, OperatorError> {
        if syntax.is_none() && exec.is_none() {
            return Err(OperatorError::Precondition("analyzer needs a syntax report or an execution outcome".into()));
        }
        let (reason, metrics) = deterministic_verdict(syntax, exec, &ctx.primary_metric);
        let signals = match &reason {
            Some(r) => format!("deterministic verdict: buggy ({r})"),
            None => {
                let m: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("deterministic verdict: ok; parsed metrics {}", m.join(", "))
            }
        };
        let messages = prompt::analyzer_messages(ctx, code, syntax, exec, &signals, attempt);
        let (analysis, flagged) = match self.call(OperatorKind::Analyzer, messages, ctx.node, attempt, calls) {
            Ok(reply) => {
                let flagged = parse::parse_verdict(&reply.text) == Some(true);
                (reply.text.trim().to_string(), flagged)
            }
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => (format!("analysis unavailable: {e}"), false),
        };
        let reason = reason.or(if flagged { Some(BugReason::AnalyzerFlagged) } else { None });
        Ok(AnalysisVerdict {
            buggy: reason.is_some(),
            analysis,
            extracted_metrics: metrics,
            needs_debug_reason: reason,
        })
    }

    /// Produces a fixed program given the failure and all earlier failed
    /// attempts (oldest first).
    #[allow(clippy::too_many_arguments)]
    pub fn code_refiner(
        &self,
        ctx: &OperatorContext,
        code: &str,
        exec: Option<&ExecOutcome>,
        analysis: &str,
        prior: &[PriorAttempt],
        attempt: u32,
        calls: &mut Vec<CallRecord>,
    ) -> Result<String, OperatorError> {
        let messages = prompt::refiner_messages(ctx, code, exec, analysis, prior, attempt);
        let reply = self.call(OperatorKind::CodeRefiner, messages, ctx.node, attempt, calls)?;
        parse::extract_code(&reply.text).ok_or(OperatorError::NoCodeBlock)
    }

    /// Analyzes strengths and weaknesses of merge candidates and distills
    /// merged suggestions.
    pub fn merge_analysis(
        &self,
        ctx: &OperatorContext,
        candidates: &[&Node],
        metric_line: impl Fn(&Node) -> String,
        calls: &mut Vec<CallRecord>,
    ) -> Result<MergeAnalysis, OperatorError> {
        if candidates.len() < 2 {
            return Err(OperatorError::Precondition("merge analysis needs at least two candidates".into()));
        }
        if let Some(n) = candidates.iter().find(|n| n.status != crate::model::NodeStatus::Valid) {
            return Err(OperatorError::Precondition(format!("merge candidate {} is not valid", n.id)));
        }
        let messages = prompt::merge_messages(ctx, candidates, metric_line);
        let reply = self.call(OperatorKind::MergeAnalysis, messages, ctx.node, 0, calls)?;
        let ids: Vec<u32> = candidates.iter().map(|n| n.id.0).collect();
        let (per_candidate, merged_suggestions) =
            parse::parse_merge(&reply.text, &ids).ok_or(OperatorError::UnparsableSuggestions)?;
        Ok(MergeAnalysis { merged_suggestions, per_candidate })
    }
}
