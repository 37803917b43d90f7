//! Prompt assembly for every operator.
//!
//! All prompts use the same sectioned layout: bold section headers on their
//! own line, followed by bullet content. The Idea Generator prompt always
//! carries the six sections in [`IDEA_SECTIONS`], in that order.

use std::fmt::Write;

use super::backend::Message;
use super::{CreatorMode, OperatorContext, PriorAttempt};
use crate::model::Node;
use crate::sandbox::{ExecOutcome, SyntaxReport};

pub const TASK_CONTEXT: &str = "**Task Context**";
pub const PARENT_NODE: &str = "**Parent Node**";
pub const OTHER_SOLUTIONS: &str = "**Summaries of Other Solutions**";
pub const SYSTEM_RULES: &str = "**System rules**";
pub const REASONING: &str = "**Reasoning Steps and Instructions**";
pub const OUTPUT_FORMAT: &str = "**Output Format**";

pub const IDEA_SECTIONS: [&str; 6] =
    [TASK_CONTEXT, PARENT_NODE, OTHER_SOLUTIONS, SYSTEM_RULES, REASONING, OUTPUT_FORMAT];

pub const PRIOR_ATTEMPT_HEADING: &str = "### Failed attempt";

const IDEA_SYSTEM: &str = "You are the strategy planner of an automated ML pipeline search. \
You study the current solution and propose concrete, prioritized improvements.";
const CODER_SYSTEM: &str = "You are an expert ML engineer. You write complete, executable training and \
evaluation pipelines and fix issues you notice along the way.";
const ANALYZER_SYSTEM: &str = "You review ML pipeline code together with its static-check report and \
execution output, and decide whether the candidate needs debugging.";
const REFINER_SYSTEM: &str = "You debug ML pipeline code. You fix the reported problems, look for \
further defects, and never repeat a fix that already failed.";
const MERGE_SYSTEM: &str = "You compare several strong ML pipeline solutions, explain what makes each \
work and where each falls short, and distill a combined plan.";

/// Default system rules; task-specific requirements are appended.
pub fn system_rules(primary_metric: &str) -> Vec<String> {
    vec![
        "All task requirements must be satisfied.".into(),
        format!(
            "Print metrics explicitly to stdout, one per line, as `SEPDD_METRIC <name>=<value>`; \
             the primary metric is {primary_metric}."
        ),
        "When the environment variable SEPDD_DEBUG=1 is set, run with minimal hyperparameters \
         (few epochs, small data subset) so the run finishes quickly."
            .into(),
        "Read input data from the directory named by SEPDD_DATA_DIR.".into(),
        "The program must be a single self-contained file.".into(),
    ]
}

const REASONING_STEPS: [&str; 4] = [
    "Read the parent code and its execution output before proposing anything.",
    "Avoid vague suggestions; every suggestion names a concrete change (parameter, component, or procedure).",
    "Prefer changes with the largest expected effect on the primary metric; put them first.",
    "Do not repeat strategies that other solutions show to be ineffective.",
];

fn section(out: &mut String, header: &str) {
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(header);
    out.push('\n');
}

fn fenced(out: &mut String, body: &str) {
    let fence = if body.contains("```") { "~~~~" } else { "```" };
    let _ = writeln!(out, "{fence}");
    out.push_str(body);
    if !body.ends_with('\n') {
        out.push('\n');
    }
    let _ = writeln!(out, "{fence}");
}

fn task_context(out: &mut String, ctx: &OperatorContext) {
    section(out, TASK_CONTEXT);
    let _ = writeln!(out, "- Task description: {}", ctx.task_description.trim());
    let _ = writeln!(out, "- Data description: {}", ctx.data_description.trim());
    let _ = writeln!(out, "- Task-Specific requirements: {}", ctx.task_requirements.trim());
    let _ = writeln!(out, "- Expansion: {}", ctx.expansion_note);
    if let Some(t) = &ctx.trigger_note {
        let _ = writeln!(out, "- Evolution trigger: {t}");
    }
}

fn parent_node(out: &mut String, ctx: &OperatorContext) {
    section(out, PARENT_NODE);
    match &ctx.parent_code {
        None => out.push_str("none (initial draft)\n"),
        Some(code) => {
            out.push_str("- Code:\n");
            fenced(out, code);
            let _ =
                writeln!(out, "- Execution output: {}", ctx.parent_exec_summary.as_deref().unwrap_or("not available"));
            let _ = writeln!(
                out,
                "- Strategies of this code: {}",
                ctx.parent_strategies.as_deref().unwrap_or("not recorded")
            );
        }
    }
}

fn rules(out: &mut String, ctx: &OperatorContext) {
    section(out, SYSTEM_RULES);
    for r in system_rules(&ctx.primary_metric) {
        let _ = writeln!(out, "- {r}");
    }
}

/// Idea Generator prompt.
pub fn idea_messages(ctx: &OperatorContext) -> Vec<Message> {
    let mut u = String::new();
    task_context(&mut u, ctx);
    parent_node(&mut u, ctx);
    section(&mut u, OTHER_SOLUTIONS);
    if ctx.journal_summaries.is_empty() {
        u.push_str("none yet\n");
    }
    for (i, s) in ctx.journal_summaries.iter().enumerate() {
        let _ = writeln!(u, "{}. Node {} ({})", i + 1, s.node, s.metrics);
        let _ = writeln!(u, "   - Model/training strategies summary: {}", s.strategy_summary);
        let _ = writeln!(u, "   - Strength analysis: {}", s.strengths);
        let _ = writeln!(u, "   - Weakness analysis: {}", s.weaknesses);
    }
    rules(&mut u, ctx);
    section(&mut u, REASONING);
    for r in REASONING_STEPS {
        let _ = writeln!(u, "- {r}");
    }
    section(&mut u, OUTPUT_FORMAT);
    u.push_str(&ctx.output_format);
    u.push('\n');
    vec![Message::system(IDEA_SYSTEM), Message::user(u)]
}

pub const IDEA_OUTPUT_FORMAT: &str = "A numbered list of suggestions in priority order, highest priority first, \
one per line as `N. <title>: <rationale>`. No other text.";

pub const FORMAT_REMINDER: &str = "Your reply could not be parsed. Answer again using only a numbered list, \
one suggestion per line as `N. <title>: <rationale>`.";

/// Code Creator prompt.
pub fn creator_messages(
    ctx: &OperatorContext,
    suggestions: &str,
    mode: CreatorMode,
    merge_candidates: &[&Node],
) -> Vec<Message> {
    let mut u = String::new();
    task_context(&mut u, ctx);
    let _ = writeln!(u, "- Mode: {}", mode.as_str());
    if mode != CreatorMode::Initial {
        parent_node(&mut u, ctx);
    }
    if mode == CreatorMode::Merge {
        section(&mut u, "**Merge Candidates**");
        for n in merge_candidates {
            let _ = writeln!(u, "### Candidate {}", n.id);
            fenced(&mut u, &n.code);
        }
    }
    section(&mut u, "**Suggestions**");
    u.push_str(suggestions.trim_end());
    u.push('\n');
    rules(&mut u, ctx);
    section(&mut u, OUTPUT_FORMAT);
    u.push_str("Return the complete program in a single fenced code block. Text outside the block is ignored.\n");
    vec![Message::system(CODER_SYSTEM), Message::user(u)]
}

/// Analyzer prompt.
pub fn analyzer_messages(
    ctx: &OperatorContext,
    code: &str,
    syntax: Option<&SyntaxReport>,
    exec: Option<&ExecOutcome>,
    signals: &str,
    attempt: u32,
) -> Vec<Message> {
    let mut u = String::new();
    task_context(&mut u, ctx);
    let _ = writeln!(u, "- Debug attempt: {attempt}");
    section(&mut u, "**Code**");
    fenced(&mut u, code);
    section(&mut u, "**Static Check**");
    u.push_str(&syntax.map_or("not run".to_string(), SyntaxReport::summary));
    u.push('\n');
    section(&mut u, "**Execution Output**");
    u.push_str(&exec.map_or("not run".to_string(), |e| e.summary(40)));
    u.push('\n');
    section(&mut u, "**Parsed Signals**");
    u.push_str(signals);
    u.push('\n');
    section(&mut u, OUTPUT_FORMAT);
    u.push_str(
        "First line `VERDICT: OK` or `VERDICT: BUGGY`. Then a short analysis: what went wrong or what limits \
         performance, and what to change next.\n",
    );
    vec![Message::system(ANALYZER_SYSTEM), Message::user(u)]
}

/// Code Refiner prompt. The failed-attempts section is omitted when there
/// are none.
pub fn refiner_messages(
    ctx: &OperatorContext,
    code: &str,
    exec: Option<&ExecOutcome>,
    analysis: &str,
    prior: &[PriorAttempt],
    attempt: u32,
) -> Vec<Message> {
    let mut u = String::new();
    task_context(&mut u, ctx);
    let _ = writeln!(u, "- Debug attempt: {attempt}");
    section(&mut u, "**Current Code**");
    fenced(&mut u, code);
    section(&mut u, "**Execution Output**");
    u.push_str(&exec.map_or("not run".to_string(), |e| e.summary(40)));
    u.push('\n');
    section(&mut u, "**Analysis**");
    u.push_str(analysis.trim_end());
    u.push('\n');
    if !prior.is_empty() {
        section(&mut u, "**Previous Failed Attempts**");
        u.push_str("These fixes did not work; do not repeat them.\n");
        for (i, p) in prior.iter().enumerate() {
            let _ = writeln!(u, "{PRIOR_ATTEMPT_HEADING} {}", i + 1);
            fenced(&mut u, &p.code);
            let _ = writeln!(u, "Analysis: {}", p.analysis.trim());
        }
    }
    rules(&mut u, ctx);
    section(&mut u, OUTPUT_FORMAT);
    u.push_str("Return the complete fixed program in a single fenced code block.\n");
    vec![Message::system(REFINER_SYSTEM), Message::user(u)]
}

/// Merge analysis prompt.
pub fn merge_messages(
    ctx: &OperatorContext,
    candidates: &[&Node],
    metric_line: impl Fn(&Node) -> String,
) -> Vec<Message> {
    let mut u = String::new();
    task_context(&mut u, ctx);
    section(&mut u, "**Candidates**");
    for n in candidates {
        let _ = writeln!(u, "### Candidate {} ({})", n.id, metric_line(n));
        let _ = writeln!(u, "Strategies: {}", n.suggestions.replace('\n', "; "));
        let _ = writeln!(u, "Analysis: {}", n.analysis.trim());
        fenced(&mut u, &n.code);
    }
    section(&mut u, REASONING);
    u.push_str("- Identify the components that make each candidate effective and the failure cases of each.\n");
    u.push_str("- Combine compatible strengths; drop anything that conflicts or failed.\n");
    section(&mut u, OUTPUT_FORMAT);
    u.push_str(
        "For each candidate a `### Candidate <id>` heading followed by `Strengths: ...` and `Weaknesses: ...` \
         lines. Then a `### Merged Suggestions` heading followed by a numbered list `N. <title>: <rationale>`.\n",
    );
    vec![Message::system(MERGE_SYSTEM), Message::user(u)]
}

/// Number of lines in `text` that are exactly `header`.
pub fn header_count(text: &str, header: &str) -> usize {
    text.lines().filter(|l| l.trim_end() == header).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{JournalSummary, OperatorContext};

    #[test]
    fn idea_prompt_has_each_section_once() {
        let mut ctx = OperatorContext::new("detect defects", "print mAP50");
        ctx.parent_code = Some("print('**Task Context**')".into());
        ctx.journal_summaries = vec![JournalSummary {
            node: crate::model::NodeId(3),
            metrics: "mAP50=0.4".into(),
            strategy_summary: "mosaic".into(),
            strengths: String::new(),
            weaknesses: String::new(),
        }];
        let text: String = idea_messages(&ctx).iter().map(|m| m.content.clone()).collect::<Vec<_>>().join("\n");
        for h in IDEA_SECTIONS {
            assert_eq!(header_count(&text, h), 1, "{h}");
        }
    }
}
