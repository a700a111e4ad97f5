//! Steady-state phasor solver and waveform synthesis for the rig circuit.
//!
//! Topology: an ideal sinusoidal source (scaled by the variac) feeds a series
//! cable impedance `cable_r + j·cable_x`, which feeds the parallel combination
//! of the series R-L load and the relay-switched shunt capacitor.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::CircuitError;
use crate::labmath;
use crate::phasor::Phasor;
use crate::scalar::{wrap_angle, Scalar};

pub const MIN_SYNTH_CYCLES: u32 = 1;
pub const MAX_SYNTH_CYCLES: u32 = 50;
/// Minimum samples per cycle accepted in a [`RigConfig`].
pub const MIN_SAMPLES_PER_CYCLE: f64 = 20.0;

/// Electrical parameters of the source, cable, load, capacitor and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigConfig<T> {
    pub source_vrms: T,
    pub frequency: T,
    pub load_r: T,
    pub load_l: T,
    pub cap_c: T,
    pub cable_r: T,
    pub cable_x: T,
    pub sample_rate: T,
    pub adc_bits: u32,
    pub adc_fullscale: T,
    pub v_sensor_gain: T,
    pub i_sensor_gain: T,
}

impl<T: Scalar> Default for RigConfig<T> {
    /// The bench rig reproduces the Z = 1 pre-lab pump (7.5 kW at pf 0.87 on
    /// 230 V, 50 Hz) with a capacitor sized for pf 0.99 and no feeder cable.
    fn default() -> Self {
        let frequency = T::of(50.0);
        let spec = labmath::personalize::<T>(0).expect("registration 0 is valid");
        let rl = labmath::identify_rl(&spec, frequency).expect("rated pump identifies");
        let sizing = labmath::size_capacitor(&spec, T::of(0.99), frequency)
            .expect("0.99 exceeds rated pf");
        let adc_fullscale = T::of(5.0);
        // Rated peaks at 80% of the half span; current scaled for the Z = 3 pump.
        let headroom = T::of(0.8) * adc_fullscale / T::of(2.0);
        let largest = labmath::personalize::<T>(2).expect("registration 2 is valid");
        let i_peak = largest.rated_current() * T::SQRT_2();
        let v_peak = spec.v_supply * T::SQRT_2();
        Self {
            source_vrms: spec.v_supply,
            frequency,
            load_r: rl.r,
            load_l: rl.l,
            cap_c: sizing.capacitance,
            cable_r: T::zero(),
            cable_x: T::zero(),
            sample_rate: T::of(10_000.0),
            adc_bits: 10,
            adc_fullscale,
            v_sensor_gain: headroom / v_peak,
            i_sensor_gain: headroom / i_peak,
        }
    }
}

fn require<T: Scalar>(
    field: &'static str,
    value: T,
    ok: bool,
    expectation: &str,
) -> Result<(), CircuitError> {
    if !value.is_finite() {
        return Err(CircuitError::InvalidConfig { field, reason: format!("must be finite, got {value}") });
    }
    if !ok {
        return Err(CircuitError::InvalidConfig { field, reason: format!("must be {expectation}, got {value}") });
    }
    Ok(())
}

impl<T: Scalar> RigConfig<T> {
    pub fn validate(&self) -> Result<(), CircuitError> {
        let zero = T::zero();
        require("source_vrms", self.source_vrms, self.source_vrms > zero, "> 0")?;
        require("frequency", self.frequency, self.frequency > zero, "> 0")?;
        require("load_r", self.load_r, self.load_r > zero, "> 0")?;
        require("load_l", self.load_l, self.load_l >= zero, ">= 0")?;
        require("cap_c", self.cap_c, self.cap_c >= zero, ">= 0")?;
        require("cable_r", self.cable_r, self.cable_r >= zero, ">= 0")?;
        require("cable_x", self.cable_x, self.cable_x >= zero, ">= 0")?;
        require(
            "sample_rate",
            self.sample_rate,
            self.sample_rate >= T::of(MIN_SAMPLES_PER_CYCLE) * self.frequency,
            ">= 20 x frequency",
        )?;
        if !(8..=16).contains(&self.adc_bits) {
            return Err(CircuitError::InvalidConfig {
                field: "adc_bits",
                reason: format!("must be in [8, 16], got {}", self.adc_bits),
            });
        }
        require("adc_fullscale", self.adc_fullscale, self.adc_fullscale > zero, "> 0")?;
        require("v_sensor_gain", self.v_sensor_gain, self.v_sensor_gain > zero, "> 0")?;
        require("i_sensor_gain", self.i_sensor_gain, self.i_sensor_gain > zero, "> 0")?;
        Ok(())
    }

    pub fn omega(&self) -> T {
        T::TAU() * self.frequency
    }

    pub fn samples_per_cycle(&self) -> T {
        self.sample_rate / self.frequency
    }

    /// Number of samples spanning `cycles` periods.
    pub fn window_len(&self, cycles: u32) -> usize {
        (T::of(cycles as f64) * self.samples_per_cycle())
            .round()
            .to_usize()
            .unwrap_or(0)
    }
}

/// Mutable truth of the rig: relay, variac and load setting plus the
/// simulation clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigState<T> {
    pub capacitor_engaged: bool,
    pub variac_fraction: T,
    pub load_fraction: T,
    pub sim_time: T,
}

impl<T: Scalar> Default for RigState<T> {
    fn default() -> Self {
        Self {
            capacitor_engaged: false,
            variac_fraction: T::one(),
            load_fraction: T::one(),
            sim_time: T::zero(),
        }
    }
}

fn clamp_fraction<T: Scalar>(x: T) -> T {
    if x.is_nan() {
        T::one()
    } else {
        x.max(T::epsilon()).min(T::one())
    }
}

impl<T: Scalar> RigState<T> {
    pub fn new(capacitor_engaged: bool, variac_fraction: T, load_fraction: T) -> Self {
        Self {
            capacitor_engaged,
            variac_fraction: clamp_fraction(variac_fraction),
            load_fraction: clamp_fraction(load_fraction),
            sim_time: T::zero(),
        }
    }

    pub fn with_capacitor(mut self, engaged: bool) -> Self {
        self.capacitor_engaged = engaged;
        self
    }

    pub fn with_variac(mut self, fraction: T) -> Self {
        self.variac_fraction = clamp_fraction(fraction);
        self
    }

    pub fn with_load(mut self, fraction: T) -> Self {
        self.load_fraction = clamp_fraction(fraction);
        self
    }

    /// Moves the clock forward; earlier times are ignored.
    pub fn at_time(mut self, sim_time: T) -> Self {
        if sim_time > self.sim_time {
            self.sim_time = sim_time;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfSign {
    Lagging,
    Leading,
    Unity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitSolution<T> {
    pub v_source: Phasor<T>,
    pub v_load: Phasor<T>,
    pub i_source: Phasor<T>,
    pub i_load: Phasor<T>,
    pub i_cap: Phasor<T>,
    pub p_source: T,
    pub p_load: T,
    pub q_load: T,
    pub p_cable_loss: T,
    pub v_drop_cable: T,
    pub power_factor: T,
    pub pf_sign: PfSign,
}

impl<T: Scalar> CircuitSolution<T> {
    /// Kirchhoff current residual `|I_s − (I_load + I_cap)| / |I_s|`.
    pub fn kcl_residual(&self) -> T {
        let is = self.i_source.to_complex();
        let sum = self.i_load.to_complex() + self.i_cap.to_complex();
        let scale = self.i_source.magnitude;
        if scale > T::zero() {
            (is - sum).norm() / scale
        } else {
            (is - sum).norm()
        }
    }

    /// Voltage-to-current phase difference, positive when current lags.
    pub fn phase_difference(&self) -> T {
        wrap_angle(self.v_load.angle - self.i_source.angle)
    }
}

/// Solves the rig network at steady state.
pub fn solve_steady_state<T: Scalar>(
    config: &RigConfig<T>,
    state: &RigState<T>,
) -> Result<CircuitSolution<T>, CircuitError> {
    config.validate()?;
    let omega = config.omega();
    let zero = T::zero();

    let load_fraction = clamp_fraction(state.load_fraction);
    let variac = clamp_fraction(state.variac_fraction);

    // Constant-impedance scaling: partial load draws proportionally less current.
    let z_load = Complex::new(config.load_r, omega * config.load_l) / load_fraction;
    check_impedance("load impedance", z_load)?;
    let y_load = z_load.inv();
    let y_cap = if state.capacitor_engaged {
        Complex::new(zero, omega * config.cap_c)
    } else {
        Complex::new(zero, zero)
    };
    let y_shunt = y_load + y_cap;
    let z_shunt = y_shunt.inv();
    check_impedance("shunt impedance", z_shunt)?;
    let z_cable = Complex::new(config.cable_r, config.cable_x);
    let z_total = z_cable + z_shunt;
    check_impedance("total impedance", z_total)?;

    let v_source = Complex::new(config.source_vrms * variac, zero);
    let i_source = v_source / z_total;
    let v_load = i_source * z_shunt;
    let i_load = v_load * y_load;
    let i_cap = v_load * y_cap;

    let s_load = v_load * i_load.conj();
    let s_source = v_source * i_source.conj();
    let s_terminal = v_load * i_source.conj();
    let i_mag = i_source.norm();
    let v_drop = i_source * z_cable;

    let v_load_p = Phasor::from_complex(v_load);
    let i_source_p = Phasor::from_complex(i_source);
    let pf = (v_load_p.angle - i_source_p.angle).cos().max(zero).min(T::one());
    let tol = T::epsilon() * T::of(1024.0) * s_terminal.norm();
    let pf_sign = if s_terminal.im.abs() <= tol {
        PfSign::Unity
    } else if s_terminal.im > zero {
        PfSign::Lagging
    } else {
        PfSign::Leading
    };

    Ok(CircuitSolution {
        v_source: Phasor::from_complex(v_source),
        v_load: v_load_p,
        i_source: i_source_p,
        i_load: Phasor::from_complex(i_load),
        i_cap: Phasor::from_complex(i_cap),
        p_source: s_source.re,
        p_load: s_load.re,
        q_load: s_load.im,
        p_cable_loss: i_mag * i_mag * config.cable_r,
        v_drop_cable: v_drop.norm(),
        power_factor: pf,
        pf_sign,
    })
}

fn check_impedance<T: Scalar>(what: &str, z: Complex<T>) -> Result<(), CircuitError> {
    let m = z.norm();
    if !m.is_finite() || m <= T::zero() || z.re.is_nan() || z.im.is_nan() {
        return Err(CircuitError::Degenerate(format!("{what} magnitude is {m}")));
    }
    Ok(())
}

/// Sampled voltage and current traces over an integer number of cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformWindow<T> {
    pub t0: T,
    pub sample_rate: T,
    pub frequency: T,
    pub cycles: u32,
    pub v_samples: Vec<T>,
    pub i_samples: Vec<T>,
}

impl<T: Scalar> WaveformWindow<T> {
    pub fn len(&self) -> usize {
        self.v_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_samples.is_empty()
    }

    pub fn duration(&self) -> T {
        T::of(self.len() as f64) / self.sample_rate
    }

    /// Phase by which the current trace lags the voltage trace, in radians,
    /// read off rising zero crossings with one-sample resolution the way a
    /// scope cursor would. `None` if either trace has no rising crossing.
    pub fn zero_crossing_lag(&self) -> Option<T> {
        let kv = rising_crossings(&self.v_samples);
        let ki = rising_crossings(&self.i_samples);
        let first_v = *kv.first()?;
        ki.first()?;
        let spc = self.sample_rate / self.frequency;
        // Nearest current crossing to the first voltage crossing, either side.
        let lag = ki
            .iter()
            .map(|&k| T::of(k as f64 - first_v as f64))
            .map(|d| wrap_angle(d / spc * T::TAU()))
            .min_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite phase"))?;
        Some(lag)
    }

    /// Root mean square of the voltage trace.
    pub fn v_rms(&self) -> T {
        rms(&self.v_samples)
    }

    pub fn i_rms(&self) -> T {
        rms(&self.i_samples)
    }
}

fn rising_crossings<T: Scalar>(xs: &[T]) -> Vec<usize> {
    xs.windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < T::zero() && w[1] >= T::zero())
        .map(|(k, _)| k + 1)
        .collect()
}

pub(crate) fn rms<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + x * x);
    (sum / T::of(xs.len() as f64)).sqrt()
}

/// Samples `v_load(t)` and `i_source(t)` starting at `state.sim_time`.
pub fn synthesize_waveforms<T: Scalar>(
    config: &RigConfig<T>,
    state: &RigState<T>,
    cycles: u32,
) -> Result<WaveformWindow<T>, CircuitError> {
    if !(MIN_SYNTH_CYCLES..=MAX_SYNTH_CYCLES).contains(&cycles) {
        return Err(CircuitError::CyclesOutOfRange {
            got: cycles,
            min: MIN_SYNTH_CYCLES,
            max: MAX_SYNTH_CYCLES,
        });
    }
    let sol = solve_steady_state(config, state)?;
    Ok(synthesize_from_solution(config, &sol, state.sim_time, cycles))
}

pub(crate) fn synthesize_from_solution<T: Scalar>(
    config: &RigConfig<T>,
    sol: &CircuitSolution<T>,
    t0: T,
    cycles: u32,
) -> WaveformWindow<T> {
    let n = config.window_len(cycles);
    let omega = config.omega();
    let period = T::one() / config.frequency;
    // Reduce the start time modulo one period so long runs keep phase precision.
    let t0_reduced = t0 - (t0 / period).floor() * period;
    let (v_pk, v_ph) = (sol.v_load.peak(), sol.v_load.angle);
    let (i_pk, i_ph) = (sol.i_source.peak(), sol.i_source.angle);
    let mut v_samples = Vec::with_capacity(n);
    let mut i_samples = Vec::with_capacity(n);
    for k in 0..n {
        let wt = omega * (t0_reduced + T::of(k as f64) / config.sample_rate);
        v_samples.push(v_pk * (wt + v_ph).sin());
        i_samples.push(i_pk * (wt + i_ph).sin());
    }
    WaveformWindow { t0, sample_rate: config.sample_rate, frequency: config.frequency, cycles, v_samples, i_samples }
}

/// Cable loss and drop with and without the correction capacitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComparison<T> {
    pub without: CircuitSolution<T>,
    pub with: CircuitSolution<T>,
    /// `with.p_cable_loss − without.p_cable_loss`.
    pub loss_delta: T,
    /// `with.v_drop_cable − without.v_drop_cable`.
    pub vdrop_delta: T,
}

impl<T: Scalar> LossComparison<T> {
    pub fn loss_ratio(&self) -> T {
        self.with.p_cable_loss / self.without.p_cable_loss
    }
}

pub fn loss_comparison<T: Scalar>(
    config: &RigConfig<T>,
    load_fraction: T,
) -> Result<LossComparison<T>, CircuitError> {
    config.validate()?;
    if config.cable_r <= T::zero() {
        return Err(CircuitError::InvalidConfig {
            field: "cable_r",
            reason: format!("must be > 0 for a loss comparison, got {}", config.cable_r),
        });
    }
    if !(load_fraction > T::zero() && load_fraction <= T::one()) {
        return Err(CircuitError::InvalidConfig {
            field: "load_fraction",
            reason: format!("must be in (0, 1], got {load_fraction}"),
        });
    }
    let base = RigState::new(false, T::one(), load_fraction);
    let without = solve_steady_state(config, &base)?;
    let with = solve_steady_state(config, &base.with_capacitor(true))?;
    Ok(LossComparison {
        without,
        with,
        loss_delta: with.p_cable_loss - without.p_cable_loss,
        vdrop_delta: with.v_drop_cable - without.v_drop_cable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Spec pump values, rounded as quoted.
    fn z1_config() -> RigConfig<f64> {
        RigConfig { load_r: 5.3388, load_l: 9.631e-3, cap_c: 191.45e-6, ..RigConfig::default() }
    }

    /// Independent real-arithmetic oracle for a series R-X load on an ideal
    /// source: |I| = V/√(R²+X²), pf = R/√(R²+X²).
    fn series_oracle(v: f64, r: f64, x: f64) -> (f64, f64) {
        let z = (r * r + x * x).sqrt();
        (v / z, r / z)
    }

    #[test]
    fn z1_pump_capacitor_off() {
        let cfg = z1_config();
        let sol = solve_steady_state(&cfg, &RigState::default()).unwrap();
        let (i, pf) = series_oracle(230.0, 5.3388, 2.0 * std::f64::consts::PI * 50.0 * 9.631e-3);
        assert_relative_eq!(sol.i_source.magnitude, i, max_relative = 1e-12);
        assert_relative_eq!(sol.power_factor, pf, max_relative = 1e-12);
        assert!((sol.power_factor - 0.87).abs() < 1e-4);
        assert!((sol.i_source.magnitude - 37.48).abs() < 0.01);
        assert_eq!(sol.pf_sign, PfSign::Lagging);
    }

    #[test]
    fn resistive_load_is_unity() {
        let cfg = RigConfig { load_l: 0.0, ..z1_config() };
        let sol = solve_steady_state(&cfg, &RigState::default()).unwrap();
        assert_eq!(sol.power_factor, 1.0);
        assert_eq!(sol.pf_sign, PfSign::Unity);
        assert_eq!(sol.q_load, 0.0);
    }

    #[test]
    fn z1_pump_corrected_to_099() {
        let cfg = z1_config();
        let sol = solve_steady_state(&cfg, &RigState::default().with_capacitor(true)).unwrap();
        assert!((sol.power_factor - 0.99).abs() < 1e-3, "pf {}", sol.power_factor);
        assert_eq!(sol.pf_sign, PfSign::Lagging);
    }

    #[test]
    fn overcorrection_leads() {
        let cfg = RigConfig { cap_c: 600e-6, ..z1_config() };
        let sol = solve_steady_state(&cfg, &RigState::default().with_capacitor(true)).unwrap();
        assert_eq!(sol.pf_sign, PfSign::Leading);
        assert!(sol.phase_difference() < 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            RigConfig { load_r: 0.0, ..z1_config() },
            RigConfig { load_r: f64::INFINITY, ..z1_config() },
            RigConfig { frequency: -50.0, ..z1_config() },
            RigConfig { cable_x: -1.0, ..z1_config() },
            RigConfig { sample_rate: 999.0, ..z1_config() },
            RigConfig { adc_bits: 7, ..z1_config() },
            RigConfig { adc_bits: 17, ..z1_config() },
            RigConfig { source_vrms: f64::NAN, ..z1_config() },
        ];
        for cfg in bad {
            assert!(matches!(
                solve_steady_state(&cfg, &RigState::default()),
                Err(CircuitError::InvalidConfig { .. })
            ));
        }
    }

    #[test]
    fn waveform_lengths_and_peak() {
        let cfg = z1_config();
        let w = synthesize_waveforms(&cfg, &RigState::default(), 1).unwrap();
        assert_eq!(w.len(), 200);
        assert_eq!(w.i_samples.len(), 200);
        let peak = w.v_samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        assert!((peak / (230.0 * 2f64.sqrt()) - 1.0).abs() < 0.005);
        assert!(synthesize_waveforms(&cfg, &RigState::default(), 0).is_err());
        assert!(synthesize_waveforms(&cfg, &RigState::default(), 51).is_err());
    }

    #[test]
    fn resistive_zero_crossings_coincide() {
        let cfg = RigConfig { load_l: 0.0, ..z1_config() };
        let w = synthesize_waveforms(&cfg, &RigState::default().at_time(0.0123), 4).unwrap();
        let lag = w.zero_crossing_lag().unwrap();
        let one_sample = std::f64::consts::TAU / 200.0;
        assert!(lag.abs() <= one_sample);
    }

    #[test]
    fn z1_current_lags_by_acos_087() {
        let cfg = z1_config();
        let w = synthesize_waveforms(&cfg, &RigState::default(), 4).unwrap();
        let lag_deg = w.zero_crossing_lag().unwrap().to_degrees();
        let expected = 0.87_f64.acos().to_degrees();
        assert!((expected - 29.54).abs() < 0.01);
        assert!((lag_deg - expected).abs() <= 1.8, "lag {lag_deg}");
    }

    #[test]
    fn loss_comparison_ratio() {
        let cfg = RigConfig { cable_r: 1e-4, ..z1_config() };
        let cmp = loss_comparison(&cfg, 1.0).unwrap();
        assert!((cmp.loss_ratio() - (0.87_f64 / 0.99).powi(2)).abs() < 0.01);
        assert!(cmp.loss_delta < 0.0);
        assert!(cmp.vdrop_delta < 0.0);
    }

    #[test]
    fn loss_comparison_zero_capacitor_identical() {
        let cfg = RigConfig { cable_r: 0.05, cap_c: 0.0, ..z1_config() };
        let cmp = loss_comparison(&cfg, 1.0).unwrap();
        assert_eq!(cmp.without, cmp.with);
        assert_eq!(cmp.loss_delta, 0.0);
    }

    #[test]
    fn loss_comparison_requires_cable() {
        let cfg = z1_config();
        assert!(matches!(
            loss_comparison(&cfg, 1.0),
            Err(CircuitError::InvalidConfig { field: "cable_r", .. })
        ));
        let cfg = RigConfig { cable_r: 0.05, ..z1_config() };
        assert!(loss_comparison(&cfg, 0.0).is_err());
    }

    #[test]
    fn f32_solver_agrees() {
        let c64 = z1_config();
        let c32 = RigConfig::<f32> {
            load_r: 5.3388,
            load_l: 9.631e-3,
            cap_c: 191.45e-6,
            ..RigConfig::default()
        };
        let s64 = solve_steady_state(&c64, &RigState::default()).unwrap();
        let s32 = solve_steady_state(&c32, &RigState::default()).unwrap();
        assert!((s32.power_factor as f64 - s64.power_factor).abs() < 1e-5);
        assert!((s32.i_source.magnitude as f64 / s64.i_source.magnitude - 1.0).abs() < 1e-5);
        assert!(s32.kcl_residual() < 1e-5);
    }
}
