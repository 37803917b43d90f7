//! Deterministic backends and sandboxes for replays, tests and examples.
//!
//! [`ef`] replays one recorded industrial run node for node. [`synthetic`]
//! generates arbitrary runs from a seed with configurable failure injection.
//! Candidate code in both is plain POSIX shell, so the same runs also work
//! against a real [`crate::sandbox::ProcessSandbox`] with `sh` as interpreter.

pub mod ef;
pub mod synthetic;

use crate::operators::CompletionRequest;

/// Heading the analyzer prompt uses for the static check section.
const STATIC_CHECK: &str = "**Static Check**";

/// Whether an analyzer request is about a full run (its static check
/// section reads "not run") rather than a validation.
pub fn is_full_run_analysis(request: &CompletionRequest) -> bool {
    let text = request.user_text();
    let mut lines = text.lines();
    while let Some(l) = lines.next() {
        if l.trim_end() == STATIC_CHECK {
            return lines.next().map(str::trim) == Some("not run");
        }
    }
    false
}

/// Wraps `code` in a fenced block the way a model would.
pub fn fence(lang: &str, code: &str) -> String {
    format!("```{lang}\n{code}```\n")
}
