//! Indicator monitoring: decides whether an evolution cycle should start.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    RetrainingFailure,
    LabelEvolution,
    OperationalChange,
    Periodic,
    Manual,
}

/// An activated trigger. The variant fixes the payload shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerEvent {
    /// The refreshed model's metric fell below the floor.
    RetrainingFailure {
        observed: f64,
        floor: f64,
    },
    /// New defect categories appeared.
    LabelEvolution {
        added: BTreeSet<String>,
        removed: BTreeSet<String>,
    },
    OperationalChange {
        note: String,
    },
    Periodic {
        elapsed_secs: i64,
        period_secs: i64,
    },
    Manual {
        note: String,
    },
}

impl TriggerEvent {
    pub fn kind(&self) -> TriggerKind {
        match self {
            TriggerEvent::RetrainingFailure { .. } => TriggerKind::RetrainingFailure,
            TriggerEvent::LabelEvolution { .. } => TriggerKind::LabelEvolution,
            TriggerEvent::OperationalChange { .. } => TriggerKind::OperationalChange,
            TriggerEvent::Periodic { .. } => TriggerKind::Periodic,
            TriggerEvent::Manual { .. } => TriggerKind::Manual,
        }
    }
}

fn join(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(", ")
}

impl fmt::Display for TriggerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerEvent::RetrainingFailure { observed, floor } => {
                write!(f, "retraining failure: metric {observed} below floor {floor}")
            }
            TriggerEvent::LabelEvolution { added, removed } => {
                write!(f, "label evolution: new categories {{{}}}", join(added))?;
                if !removed.is_empty() {
                    write!(f, ", retired {{{}}}", join(removed))?;
                }
                Ok(())
            }
            TriggerEvent::OperationalChange { note } => write!(f, "operational change: {note}"),
            TriggerEvent::Periodic { elapsed_secs, period_secs } => {
                write!(f, "periodic evolution: {elapsed_secs}s elapsed, period {period_secs}s")
            }
            TriggerEvent::Manual { note } => write!(f, "manual: {note}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorState {
    #[serde(default)]
    pub last_refresh_metric: Option<f64>,
    pub metric_floor: f64,
    #[serde(default)]
    pub known_labels: BTreeSet<String>,
    pub last_evolution_at: DateTime<Utc>,
    pub period_secs: i64,
    #[serde(default)]
    pub ops_change_flag: bool,
    /// Valid range of the monitored metric; the floor must lie inside it.
    #[serde(default = "unit_range")]
    pub metric_range: (f64, f64),
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

impl IndicatorState {
    pub fn check(&self) -> Result<(), TriggerError> {
        let (lo, hi) = self.metric_range;
        if !(self.metric_floor.is_finite() && lo <= self.metric_floor && self.metric_floor <= hi) {
            return Err(TriggerError::Invalid(format!(
                "metric_floor {} outside the metric range [{lo}, {hi}]",
                self.metric_floor
            )));
        }
        if self.period_secs <= 0 {
            return Err(TriggerError::Invalid("period_secs must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh observations from outside the engine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    #[serde(default)]
    pub metric: Option<f64>,
    #[serde(default)]
    pub labels: Option<BTreeSet<String>>,
    #[serde(default)]
    pub ops_note: Option<String>,
}

/// Returns the highest-priority firing trigger, in the order retraining
/// failure, label evolution, operational change, periodic.
pub fn evaluate_triggers(state: &IndicatorState, now: DateTime<Utc>, observed: &Observed) -> Option<TriggerEvent> {
    if let Some(m) = observed.metric.or(state.last_refresh_metric) {
        if m < state.metric_floor {
            return Some(TriggerEvent::RetrainingFailure { observed: m, floor: state.metric_floor });
        }
    }
    if let Some(labels) = &observed.labels {
        let added: BTreeSet<String> = labels.difference(&state.known_labels).cloned().collect();
        if !added.is_empty() {
            let removed = state.known_labels.difference(labels).cloned().collect();
            return Some(TriggerEvent::LabelEvolution { added, removed });
        }
    }
    if let Some(note) = observed.ops_note.as_ref().filter(|n| !n.trim().is_empty()) {
        return Some(TriggerEvent::OperationalChange { note: note.clone() });
    }
    if state.ops_change_flag {
        return Some(TriggerEvent::OperationalChange { note: "operational change flagged".into() });
    }
    let elapsed = (now - state.last_evolution_at).num_seconds();
    if elapsed >= state.period_secs {
        return Some(TriggerEvent::Periodic { elapsed_secs: elapsed, period_secs: state.period_secs });
    }
    None
}

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("indicator file {path}: {message}")]
    Load { path: String, message: String },
    #[error("invalid indicator state: {0}")]
    Invalid(String),
}

/// Contents of an indicator file (JSON, or TOML when the extension is
/// `.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorFile {
    pub state: IndicatorState,
    #[serde(default)]
    pub observed: Observed,
}

impl IndicatorFile {
    pub fn load(path: &Path) -> Result<Self, TriggerError> {
        let err = |message: String| TriggerError::Load { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: IndicatorFile = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| err(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?
        };
        file.state.check()?;
        Ok(file)
    }

    pub fn evaluate(&self, now: DateTime<Utc>) -> Option<TriggerEvent> {
        evaluate_triggers(&self.state, now, &self.observed)
    }
}
