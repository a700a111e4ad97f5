use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error("invalid rig config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("degenerate circuit: {0}")]
    Degenerate(String),
    #[error("cycles must be in [{min}, {max}], got {got}")]
    CyclesOutOfRange { got: u32, min: u32, max: u32 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabMathError {
    #[error("registration number must be non-negative, got {0}")]
    NegativeRegistration(i64),
    #[error("power factor must be in (0, 1], got {0}")]
    InvalidPowerFactor(f64),
    #[error("target power factor {target} does not exceed rated {rated}")]
    TargetNotAboveRated { target: f64, rated: f64 },
    #[error("no cable in table carries {required:.2} A")]
    NoAdequateCable { required: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("degenerate signal: {0} channel never crosses mid-scale")]
    DegenerateSignal(crate::sensing::Channel),
    #[error("empty window")]
    EmptyWindow,
    #[error("window spans {0} cycles, at least 2 required")]
    TooFewCycles(u32),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}
