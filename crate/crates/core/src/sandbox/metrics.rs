//! Metric extraction from candidate stdout.
//!
//! Candidates report results with one line per metric:
//!
//! ```text
//! SEPDD_METRIC mAP50=0.4954
//! ```
//!
//! `name` matches `[A-Za-z0-9_.-]+` and the value is a plain decimal
//! (optional sign, fraction and exponent). Lines that start with the marker
//! but do not parse produce a warning and are skipped. The last occurrence of
//! a name wins.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::MetricMap;

pub const METRIC_MARKER: &str = "SEPDD_METRIC";

/// Fallback pattern for candidates that print metrics in some other shape.
/// The value comes from the capture group named `value`, or else the first
/// capture group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricPattern {
    pub name: String,
    #[serde(with = "serde_regex")]
    pub regex: Regex,
}

impl PartialEq for MetricPattern {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.regex.as_str() == other.regex.as_str()
    }
}

impl MetricPattern {
    pub fn new(name: impl Into<String>, pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self { name: name.into(), regex: Regex::new(pattern)? })
    }
}

mod serde_regex {
    use regex::Regex;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(re: &Regex, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(re.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Regex, D::Error> {
        let s = String::deserialize(d)?;
        Regex::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricExtraction {
    pub metrics: MetricMap,
    pub warnings: Vec<String>,
}

/// Parses a metric protocol line. Returns `None` when the line is not a
/// protocol line at all, `Some(Err)` when it starts with the marker but is
/// malformed.
fn parse_line(line: &str) -> Option<Result<(String, f64), String>> {
    let rest = line.trim_end().strip_prefix(METRIC_MARKER)?;
    let Some(body) = rest.strip_prefix(' ') else {
        return Some(Err(format!("malformed metric line: {line:?}")));
    };
    let Some((name, value)) = body.split_once('=') else {
        return Some(Err(format!("metric line without '=': {line:?}")));
    };
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-')) {
        return Some(Err(format!("invalid metric name in {line:?}")));
    }
    match parse_decimal(value) {
        Some(v) => Some(Ok((name.to_string(), v))),
        None => Some(Err(format!("invalid value for metric {name}: {value:?}"))),
    }
}

/// Accepts `[+-]? (digits [. digits?] | . digits) ([eE] [+-]? digits)?`.
/// Rejects `nan`, `inf` and anything else `f64::from_str` would otherwise let
/// through.
fn parse_decimal(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - frac_start;
    }
    if int_digits + frac_digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Extracts metrics from candidate stdout. Never fails: malformed protocol
/// lines become warnings.
pub fn extract_metrics(stdout: &str, patterns: &[MetricPattern]) -> MetricExtraction {
    let mut out = MetricExtraction::default();
    for line in stdout.lines() {
        match parse_line(line) {
            Some(Ok((name, value))) => {
                out.metrics.insert(name, value);
            }
            Some(Err(w)) => out.warnings.push(w),
            None => {}
        }
    }
    for pattern in patterns {
        if out.metrics.contains_key(&pattern.name) {
            continue;
        }
        let last = pattern
            .regex
            .captures_iter(stdout)
            .filter_map(|c| c.name("value").or_else(|| c.get(1)).and_then(|m| parse_decimal(m.as_str().trim())))
            .last();
        if let Some(v) = last {
            out.metrics.insert(pattern.name.clone(), v);
        }
    }
    out
}
