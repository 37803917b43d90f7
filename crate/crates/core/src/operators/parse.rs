//! Parsers for operator completions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub title: String,
    pub rationale: String,
    pub priority: u32,
}

/// Prioritized improvement ideas, highest priority first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestions {
    pub items: Vec<Suggestion>,
    pub raw: String,
}

impl Suggestions {
    /// Canonical `N. title: rationale` rendering stored on nodes.
    pub fn render(&self) -> String {
        self.items
            .iter()
            .map(|s| {
                if s.rationale.is_empty() {
                    format!("{}. {}", s.priority, s.title)
                } else {
                    format!("{}. {}: {}", s.priority, s.title, s.rationale)
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn titles(&self) -> Vec<&str> {
        self.items.iter().map(|s| s.title.as_str()).collect()
    }
}

fn list_item(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for bullet in ["- ", "* ", "+ ", "• "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && digits <= 3 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(r);
        }
    }
    None
}

fn strip_emphasis(s: &str) -> String {
    s.trim().trim_matches('*').trim_matches('_').trim().to_string()
}

/// Parses a numbered or bulleted list. Continuation lines (indented, not
/// themselves list items) extend the previous item's rationale. Priority is
/// the item's position, starting at 1.
pub fn parse_suggestions(text: &str) -> Option<Suggestions> {
    let mut items: Vec<Suggestion> = Vec::new();
    for line in text.lines() {
        if let Some(body) = list_item(line) {
            let body = body.trim();
            if body.is_empty() {
                continue;
            }
            let (title, rationale) = match body.find(": ").or_else(|| body.strip_suffix(':').map(|b| b.len())) {
                Some(i) => (strip_emphasis(&body[..i]), body[i + 1..].trim().to_string()),
                None => match body.split_once(" - ") {
                    Some((t, r)) => (strip_emphasis(t), r.trim().to_string()),
                    None => (strip_emphasis(body), String::new()),
                },
            };
            if title.is_empty() {
                continue;
            }
            let priority = items.len() as u32 + 1;
            items.push(Suggestion { title, rationale, priority });
        } else if let Some(last) = items.last_mut() {
            let cont = line.trim();
            if !cont.is_empty() && line.starts_with(char::is_whitespace) {
                if !last.rationale.is_empty() {
                    last.rationale.push(' ');
                }
                last.rationale.push_str(cont);
            }
        }
    }
    if items.is_empty() {
        None
    } else {
        Some(Suggestions { items, raw: text.to_string() })
    }
}

/// Contents of the last fenced code block (```` ``` ```` or `~~~`).
/// Returns `None` when no non-empty block exists.
pub fn extract_code(text: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let t = line.trim_start();
        match &mut current {
            None => {
                if let Some(fence) = ["```", "~~~"].iter().find(|f| t.starts_with(**f)) {
                    let len = t.bytes().take_while(|b| *b == fence.as_bytes()[0]).count();
                    current = Some((t[..len].to_string(), Vec::new()));
                }
            }
            Some((fence, lines)) => {
                if t.trim_end() == fence.as_str() {
                    blocks.push(lines.join("\n"));
                    current = None;
                } else {
                    lines.push(line);
                }
            }
        }
    }
    blocks.into_iter().rev().find(|b| !b.trim().is_empty()).map(|mut b| {
        b.push('\n');
        b
    })
}

/// Reads an optional `VERDICT: OK|BUGGY` line. `Some(true)` means the model
/// judged the candidate buggy.
pub fn parse_verdict(text: &str) -> Option<bool> {
    text.lines().find_map(|l| {
        let t = l.trim().trim_matches('*').trim();
        let rest = t.strip_prefix("VERDICT:").or_else(|| t.strip_prefix("Verdict:"))?;
        match rest.trim().trim_matches('*').trim().to_ascii_uppercase().as_str() {
            "BUGGY" => Some(true),
            "OK" => Some(false),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnalysis {
    pub strengths: String,
    pub weaknesses: String,
}

/// Parses a merge analysis:
///
/// ```text
/// ### Candidate 10
/// Strengths: ...
/// Weaknesses: ...
/// ### Merged Suggestions
/// 1. ...
/// ```
///
/// Returns the per-candidate analyses in the order of `ids` (missing
/// sections stay empty) and the merged suggestions.
pub fn parse_merge(text: &str, ids: &[u32]) -> Option<(Vec<CandidateAnalysis>, Suggestions)> {
    let mut per: Vec<CandidateAnalysis> = vec![CandidateAnalysis::default(); ids.len()];
    let mut current: Option<usize> = None;
    let mut merged = String::new();
    let mut in_merged = false;
    for line in text.lines() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('#') {
            let h = h.trim_start_matches('#').trim();
            in_merged = h.to_ascii_lowercase().starts_with("merged");
            current = h
                .strip_prefix("Candidate")
                .and_then(|r| r.trim().trim_start_matches("Node").trim().parse::<u32>().ok())
                .and_then(|id| ids.iter().position(|x| *x == id));
            continue;
        }
        if in_merged {
            merged.push_str(line);
            merged.push('\n');
        } else if let Some(i) = current {
            if let Some(s) = t.strip_prefix("Strengths:") {
                per[i].strengths = s.trim().to_string();
            } else if let Some(w) = t.strip_prefix("Weaknesses:") {
                per[i].weaknesses = w.trim().to_string();
            }
        }
    }
    let suggestions = if merged.trim().is_empty() { parse_suggestions(text)? } else { parse_suggestions(&merged)? };
    Some((per, suggestions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_ideas() {
        let s = parse_suggestions(
            "Here you go:\n1. **Mosaic augmentation**: boosts small defects\n2) Label smoothing: calibration\n   and stability\n3. Larger imgsz\n",
        )
        .unwrap();
        assert_eq!(s.items.len(), 3);
        assert_eq!(s.items.iter().map(|i| i.priority).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(s.items[0].title, "Mosaic augmentation");
        assert_eq!(s.items[1].rationale, "calibration and stability");
        assert_eq!(s.items[2].rationale, "");
    }

    #[test]
    fn bulleted_and_single() {
        let s = parse_suggestions("- Use AdamW - better convergence").unwrap();
        assert_eq!(s.items.len(), 1);
        assert_eq!(s.items[0].title, "Use AdamW");
        assert_eq!(s.items[0].rationale, "better convergence");
    }

    #[test]
    fn prose_is_not_a_list() {
        assert!(parse_suggestions("").is_none());
        assert!(parse_suggestions("I think you should train longer.").is_none());
        assert!(parse_suggestions("2024. was a year").is_none());
    }

    #[test]
    fn render_round_trips() {
        let s = parse_suggestions("1. A: x\n2. B").unwrap();
        assert_eq!(parse_suggestions(&s.render()).unwrap().items, s.items);
    }

    #[test]
    fn code_blocks() {
        assert_eq!(extract_code("text\n```python\nprint(1)\n```\n").unwrap(), "print(1)\n");
        assert_eq!(extract_code("```\na\n```\nand\n```sh\nb\n```").unwrap(), "b\n");
        assert_eq!(extract_code("no code"), None);
        assert_eq!(extract_code("```\n\n```"), None);
        assert_eq!(extract_code("````\n```inner```\nx\n````").unwrap(), "```inner```\nx\n");
        // unterminated block is ignored
        assert_eq!(extract_code("```\nx\n"), None);
    }

    #[test]
    fn verdict_line() {
        assert_eq!(parse_verdict("VERDICT: BUGGY\nreason"), Some(true));
        assert_eq!(parse_verdict("**Verdict: ok**"), Some(false));
        assert_eq!(parse_verdict("nothing"), None);
    }

    #[test]
    fn merge_sections() {
        let text = "### Candidate 10\nStrengths: strong box loss\nWeaknesses: slow\n### Candidate 3\nStrengths: mosaic\n### Merged Suggestions\n1. Box loss gain: from 10\n2. Mosaic: from 3\n";
        let (per, s) = parse_merge(text, &[10, 3]).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].strengths, "strong box loss");
        assert_eq!(per[0].weaknesses, "slow");
        assert_eq!(per[1].strengths, "mosaic");
        assert_eq!(s.items.len(), 2);
    }
}
