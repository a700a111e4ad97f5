//! Numerical core of the remote power-factor-correction lab.
//!
//! Everything here is generic over a real [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the service uses.

pub mod circuit;
pub mod error;
pub mod labmath;
pub mod phasor;
pub mod scalar;
pub mod sensing;

pub use circuit::{
    loss_comparison, solve_steady_state, synthesize_waveforms, CircuitSolution, LossComparison, PfSign,
    RigConfig, RigState, WaveformWindow,
};
pub use error::{CircuitError, LabMathError, SensingError};
pub use labmath::{
    compare_losses, default_cable_table, identify_rl, personalize, prelab_report, select_cable, size_capacitor,
    CableSelection, CableSpec, CapacitorSizing, CorrectionResult, PrelabReport, PumpSpec, SeriesRL,
};
pub use phasor::Phasor;
pub use scalar::Scalar;
pub use sensing::{
    digitize, measure, windowed_rms, xor_phase, Channel, DigitizedWindow, MeasurementFrame, NoiseModel, XorReading,
};

pub type Phasor64 = Phasor<f64>;
pub type RigConfig64 = RigConfig<f64>;
pub type RigState64 = RigState<f64>;
pub type CircuitSolution64 = CircuitSolution<f64>;
pub type WaveformWindow64 = WaveformWindow<f64>;
pub type MeasurementFrame64 = MeasurementFrame<f64>;
pub type DigitizedWindow64 = DigitizedWindow<f64>;
pub type PumpSpec64 = PumpSpec<f64>;
pub type CableSpec64 = CableSpec<f64>;
pub type CorrectionResult64 = CorrectionResult<f64>;
pub type PrelabReport64 = PrelabReport<f64>;

pub type RigConfig32 = RigConfig<f32>;
pub type RigState32 = RigState<f32>;
pub type CircuitSolution32 = CircuitSolution<f32>;
