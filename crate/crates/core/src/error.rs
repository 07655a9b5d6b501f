//! Crate-wide error type.

use thiserror::Error;

/// Stage of the key-distillation pipeline, used to tag protocol aborts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Sift,
    QberEstimate,
    Reconcile,
    PrivacyAmplify,
    Confirm,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Sift => "sift",
            Stage::QberEstimate => "qber-estimate",
            Stage::Reconcile => "reconcile",
            Stage::PrivacyAmplify => "privacy-amplify",
            Stage::Confirm => "confirm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("visibility {0} outside [0, 1]")]
    InvalidVisibility(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expected event count {expected:.0} exceeds memory cap {cap}")]
    EventBudget { expected: f64, cap: u64 },

    #[error("event stream is not time-sorted (index {0})")]
    UnsortedEvents(usize),

    #[error("count matrix has zero total")]
    ZeroTotal,

    #[error("zero singles on an involved detector (receiver {receiver}, detector {detector})")]
    ZeroSingles { receiver: &'static str, detector: u8 },

    #[error("CHSH component settings do not form the required (a, a', b, b') grid: {0}")]
    RoleMismatch(String),

    #[error("sinusoid fit failed: singular normal equations")]
    FitSingular,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session aborted at {stage}: {reason}")]
    Abort { stage: Stage, reason: String },

    #[error("channel closed")]
    ChannelClosed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
