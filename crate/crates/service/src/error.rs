use thiserror::Error;

use pfclab_core::{CircuitError, SensingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("log error: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RigError {
    #[error("variac fraction must be in (0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("scope depth must be in [1, {max}] cycles, got {got}")]
    ScopeDepth { got: u32, max: u32 },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("slot end must be after start")]
    InvalidInterval,
    #[error("slot overlaps {0}")]
    Overlap(String),
    #[error("claim code not recognised")]
    UnknownCode,
    #[error("outside the slot window")]
    NotYourTime,
    #[error("slot already has an active session")]
    AlreadyClaimed,
    #[error("rig is held by another session")]
    RigBusy,
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("slot store: {0}")]
    Store(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidInterval => "invalid_interval",
            SessionError::Overlap(_) => "overlap",
            SessionError::UnknownCode => "unknown_code",
            SessionError::NotYourTime => "not_your_time",
            SessionError::AlreadyClaimed => "already_claimed",
            SessionError::RigBusy => "rig_busy",
            SessionError::UnknownSlot(_) => "unknown_slot",
            SessionError::Store(_) => "store_error",
        }
    }
}
