//! Transient stability index and five-class window labels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operating-state class of one observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum StabilityLabel {
    Stable = 1,
    FaultOccurrence = 2,
    FaultDuration = 3,
    FaultClearance = 4,
    Unstable = 5,
}

pub const CLASS_COUNT: usize = 5;

impl StabilityLabel {
    pub const ALL: [StabilityLabel; CLASS_COUNT] = [
        StabilityLabel::Stable,
        StabilityLabel::FaultOccurrence,
        StabilityLabel::FaultDuration,
        StabilityLabel::FaultClearance,
        StabilityLabel::Unstable,
    ];

    pub fn class_id(self) -> u8 {
        self as u8
    }

    /// Zero-based index, as used for network outputs.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_class_id(id: u8) -> Result<Self> {
        match id {
            1..=5 => Ok(Self::ALL[id as usize - 1]),
            _ => Err(Error::invalid(format!("class id {id} outside 1..=5"))),
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class index {i} outside 0..5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            StabilityLabel::Stable => "Stable",
            StabilityLabel::FaultOccurrence => "FaultOccurrence",
            StabilityLabel::FaultDuration => "FaultDuration",
            StabilityLabel::FaultClearance => "FaultClearance",
            StabilityLabel::Unstable => "Unstable",
        }
    }
}

impl fmt::Display for StabilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsiResult {
    /// Largest rotor-angle separation between any two machines, degrees.
    pub delta_max: f64,
    pub eta_tsi: f64,
}

impl TsiResult {
    pub fn is_stable(&self) -> bool {
        self.eta_tsi > 0.0
    }
}

/// Transient stability index `(360 − Δδmax) / (360 + Δδmax)`.
pub fn tsi(delta_max: f64) -> Result<TsiResult> {
    if !delta_max.is_finite() || delta_max < 0.0 {
        return Err(Error::invalid(format!("delta_max must be finite and non-negative, got {delta_max}")));
    }
    Ok(TsiResult {
        delta_max,
        eta_tsi: (360.0 - delta_max) / (360.0 + delta_max),
    })
}

/// Event timing of one trajectory, in sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTiming {
    pub steps: usize,
    pub fault_on: usize,
    pub fault_clear: usize,
    pub instability: Option<usize>,
}

/// Labels the window `[start, start + len)`.
///
/// Precedence when several classes apply: Unstable, FaultClearance,
/// FaultOccurrence, FaultDuration, Stable.
pub fn label_window(start: usize, len: usize, t: &EventTiming) -> Result<StabilityLabel> {
    if len == 0 || start + len > t.steps {
        return Err(Error::invalid(format!(
            "window [{start}, {}) outside [0, {})",
            start + len,
            t.steps
        )));
    }
    if t.fault_on >= t.fault_clear {
        return Err(Error::invalid("fault_on must precede fault_clear"));
    }
    let end = start + len - 1;
    let contains = |k: usize| start <= k && k <= end;
    let label = if t.instability.is_some_and(|u| end >= u) {
        StabilityLabel::Unstable
    } else if contains(t.fault_clear) {
        StabilityLabel::FaultClearance
    } else if contains(t.fault_on) {
        StabilityLabel::FaultOccurrence
    } else if start > t.fault_on && end < t.fault_clear {
        StabilityLabel::FaultDuration
    } else {
        StabilityLabel::Stable
    };
    Ok(label)
}
