//! Instrumentation path: sensor gains, ADC quantization, comparator squaring,
//! XOR phase pulse, pulse-width timing and windowed RMS.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuit::{solve_steady_state, synthesize_from_solution, RigConfig, RigState, WaveformWindow};
use crate::error::SensingError;
use crate::scalar::Scalar;

/// Cycles averaged per measurement frame.
pub const MEASURE_CYCLES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Voltage,
    Current,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Voltage => "voltage",
            Channel::Current => "current",
        })
    }
}

/// One GUI readout: RMS voltage and current plus XOR-derived power factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame<T> {
    pub vrms: T,
    pub irms: T,
    pub power_factor: T,
    pub capacitor_engaged: bool,
    /// End of the measured window, seconds of simulation time.
    pub timestamp: T,
    pub window_cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitizedWindow<T> {
    pub t0: T,
    pub sample_rate: T,
    pub frequency: T,
    pub cycles: u32,
    pub bits: u32,
    pub lsb_volts: T,
    pub v_codes: Vec<u32>,
    pub i_codes: Vec<u32>,
    /// Set when any analog sample fell outside the converter span.
    pub clipped: bool,
}

impl<T> DigitizedWindow<T> {
    pub fn midscale(&self) -> u32 {
        1 << (self.bits - 1)
    }

    pub fn max_code(&self) -> u32 {
        (1 << self.bits) - 1
    }

    pub fn codes(&self, channel: Channel) -> &[u32] {
        match channel {
            Channel::Voltage => &self.v_codes,
            Channel::Current => &self.i_codes,
        }
    }
}

/// Gaussian noise added at the converter input, in volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel<T> {
    pub sigma_volts: T,
}

struct Quantizer<T> {
    half_span: T,
    fullscale: T,
    lsb: T,
    max_code: u32,
}

impl<T: Scalar> Quantizer<T> {
    fn new(config: &RigConfig<T>) -> Self {
        let levels = T::of((1u64 << config.adc_bits) as f64);
        Self {
            half_span: config.adc_fullscale / T::of(2.0),
            fullscale: config.adc_fullscale,
            lsb: config.adc_fullscale / levels,
            max_code: (1 << config.adc_bits) - 1,
        }
    }

    /// Returns the code and whether the input left the converter span.
    fn code(&self, sensed_volts: T) -> (u32, bool) {
        let analog = sensed_volts + self.half_span;
        let clipped = analog < T::zero() || analog > self.fullscale;
        let raw = (analog / self.lsb).round();
        let code = if raw <= T::zero() {
            0
        } else {
            raw.to_u32().unwrap_or(self.max_code).min(self.max_code)
        };
        (code, clipped)
    }
}

/// Scales both traces through the sensor gains and quantizes them around
/// mid-scale, `code = clamp(round((gain·x + FS/2) / lsb))`.
pub fn digitize<T: Scalar>(window: &WaveformWindow<T>, config: &RigConfig<T>) -> DigitizedWindow<T> {
    digitize_inner(window, config, |_| T::zero())
}

pub fn digitize_noisy<T: Scalar, R: Rng + ?Sized>(
    window: &WaveformWindow<T>,
    config: &RigConfig<T>,
    noise: &NoiseModel<T>,
    rng: &mut R,
) -> DigitizedWindow<T> {
    let sigma = noise.sigma_volts.to_f64_lossy();
    match Normal::new(0.0, sigma) {
        Ok(normal) if sigma > 0.0 => digitize_inner(window, config, |_| T::of(normal.sample(rng))),
        _ => digitize(window, config),
    }
}

fn digitize_inner<T: Scalar>(
    window: &WaveformWindow<T>,
    config: &RigConfig<T>,
    mut noise: impl FnMut(usize) -> T,
) -> DigitizedWindow<T> {
    let q = Quantizer::new(config);
    let mut clipped = false;
    let run = |xs: &[T], gain: T, clipped: &mut bool, noise: &mut dyn FnMut(usize) -> T| -> Vec<u32> {
        xs.iter()
            .enumerate()
            .map(|(k, &x)| {
                let (c, clip) = q.code(gain * x + noise(k));
                *clipped |= clip;
                c
            })
            .collect()
    };
    let v_codes = run(&window.v_samples, config.v_sensor_gain, &mut clipped, &mut noise);
    let i_codes = run(&window.i_samples, config.i_sensor_gain, &mut clipped, &mut noise);
    DigitizedWindow {
        t0: window.t0,
        sample_rate: window.sample_rate,
        frequency: window.frequency,
        cycles: window.cycles,
        bits: config.adc_bits,
        lsb_volts: q.lsb,
        v_codes,
        i_codes,
        clipped,
    }
}

/// Reconstructed RMS of one channel in physical units.
pub fn windowed_rms<T: Scalar>(
    window: &DigitizedWindow<T>,
    channel: Channel,
    config: &RigConfig<T>,
) -> Result<T, SensingError> {
    let codes = window.codes(channel);
    if codes.is_empty() {
        return Err(SensingError::EmptyWindow);
    }
    let gain = match channel {
        Channel::Voltage => config.v_sensor_gain,
        Channel::Current => config.i_sensor_gain,
    };
    let mid = window.midscale() as i64;
    let sum_sq: f64 = codes
        .iter()
        .map(|&c| {
            let d = (c as i64 - mid) as f64;
            d * d
        })
        .sum();
    let mean_sq = T::of(sum_sq / codes.len() as f64);
    Ok(mean_sq.sqrt() * window.lsb_volts / gain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XorReading<T> {
    pub duty: T,
    pub phase_rad: T,
    pub power_factor: T,
}

/// Comparator edge on the circular window, in units of samples.
struct Edge {
    at: BigRational,
    high_after: bool,
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Comparator output edges for one channel.
///
/// The window holds an integer number of cycles so it is treated as
/// periodic. An edge between two samples of opposite sign sits where the
/// straight line through them meets mid-scale; when mid-scale codes separate
/// the two signs the edge sits at the middle of that run.
fn comparator_edges(codes: &[u32], mid: u32) -> Vec<Edge> {
    let n = codes.len() as i64;
    let offs: Vec<i64> = codes.iter().map(|&c| c as i64 - mid as i64).collect();
    let nonzero: Vec<i64> = (0..n).filter(|&k| offs[k as usize] != 0).collect();
    let mut edges = Vec::new();
    for (idx, &p) in nonzero.iter().enumerate() {
        let q = if idx + 1 < nonzero.len() { nonzero[idx + 1] } else { nonzero[0] + n };
        let dp = offs[p as usize];
        let dq = offs[(q % n) as usize];
        if (dp > 0) == (dq > 0) {
            continue;
        }
        let mut at = if q == p + 1 {
            ratio(p, 1) + ratio(dp, dp - dq)
        } else {
            ratio(p + q, 2)
        };
        let period = ratio(n, 1);
        if at >= period {
            at -= period;
        }
        edges.push(Edge { at, high_after: dq > 0 });
    }
    edges.sort_by(|a, b| a.at.cmp(&b.at));
    edges
}

/// XOR phase detector over the squared voltage and current channels.
///
/// The XOR output is high while exactly one comparator is high; its duty
/// cycle maps linearly onto the phase difference in `[0, π]`. The pulse width
/// is integrated exactly, so the reading is invariant under swapping the
/// channels, polarity inversion and time reversal of the window.
pub fn xor_phase<T: Scalar>(window: &DigitizedWindow<T>) -> Result<XorReading<T>, SensingError> {
    if window.v_codes.is_empty() || window.i_codes.is_empty() {
        return Err(SensingError::EmptyWindow);
    }
    if window.cycles < 2 {
        return Err(SensingError::TooFewCycles(window.cycles));
    }
    let mid = window.midscale();
    let v = comparator_edges(&window.v_codes, mid);
    if v.is_empty() {
        return Err(SensingError::DegenerateSignal(Channel::Voltage));
    }
    let i = comparator_edges(&window.i_codes, mid);
    if i.is_empty() {
        return Err(SensingError::DegenerateSignal(Channel::Current));
    }
    let n = window.v_codes.len().min(window.i_codes.len()) as i64;
    let high = xor_high_time(&v, &i, ratio(n, 1));
    let duty_exact = high / ratio(n, 1);
    let duty = T::of(duty_exact.to_f64().unwrap_or(f64::NAN)).max(T::zero()).min(T::one());
    let phase_rad = duty * T::PI();
    Ok(XorReading { duty, phase_rad, power_factor: phase_rad.cos().max(T::zero()) })
}

fn xor_high_time(a: &[Edge], b: &[Edge], period: BigRational) -> BigRational {
    // State at the origin equals the state after the last edge of the cycle.
    let mut state_a = a.last().map(|e| e.high_after).unwrap_or(false);
    let mut state_b = b.last().map(|e| e.high_after).unwrap_or(false);
    let mut merged: Vec<(&BigRational, u8, bool)> = a
        .iter()
        .map(|e| (&e.at, 0u8, e.high_after))
        .chain(b.iter().map(|e| (&e.at, 1u8, e.high_after)))
        .collect();
    merged.sort_by(|x, y| match x.0.cmp(y.0) {
        Ordering::Equal => x.1.cmp(&y.1),
        o => o,
    });
    let mut total = BigRational::zero();
    let mut prev = BigRational::zero();
    for (at, which, high) in merged {
        if state_a != state_b {
            total += at - &prev;
        }
        if which == 0 {
            state_a = high;
        } else {
            state_b = high;
        }
        prev = at.clone();
    }
    if state_a != state_b {
        total += period - prev;
    }
    total
}

/// Full chain at the rig's current state: synthesize, digitize, then RMS
/// and XOR phase over [`MEASURE_CYCLES`] cycles.
pub fn measure<T: Scalar>(config: &RigConfig<T>, state: &RigState<T>) -> Result<MeasurementFrame<T>, SensingError> {
    measure_with(config, state, MEASURE_CYCLES, None::<(&NoiseModel<T>, &mut rand::rngs::ThreadRng)>)
}

pub fn measure_with<T: Scalar, R: Rng>(
    config: &RigConfig<T>,
    state: &RigState<T>,
    cycles: u32,
    noise: Option<(&NoiseModel<T>, &mut R)>,
) -> Result<MeasurementFrame<T>, SensingError> {
    if cycles < 2 {
        return Err(SensingError::TooFewCycles(cycles));
    }
    let sol = solve_steady_state(config, state)?;
    let window = synthesize_from_solution(config, &sol, state.sim_time, cycles);
    let digitized = match noise {
        Some((model, rng)) => digitize_noisy(&window, config, model, rng),
        None => digitize(&window, config),
    };
    let xor = xor_phase(&digitized)?;
    Ok(MeasurementFrame {
        vrms: windowed_rms(&digitized, Channel::Voltage, config)?,
        irms: windowed_rms(&digitized, Channel::Current, config)?,
        power_factor: xor.power_factor,
        capacitor_engaged: state.capacitor_engaged,
        timestamp: window.t0 + window.duration(),
        window_cycles: cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::synthesize_waveforms;
    use std::f64::consts::PI;

    fn cfg() -> RigConfig<f64> {
        RigConfig::default()
    }

    /// Hand-built window: v = A sin(ωt), i = B sin(ωt − φ).
    fn window(phi: f64, v_peak: f64, i_peak: f64, cycles: u32) -> WaveformWindow<f64> {
        let c = cfg();
        let n = c.window_len(cycles);
        let w = 2.0 * PI * c.frequency;
        let t = |k: usize| k as f64 / c.sample_rate;
        WaveformWindow {
            t0: 0.0,
            sample_rate: c.sample_rate,
            frequency: c.frequency,
            cycles,
            v_samples: (0..n).map(|k| v_peak * (w * t(k)).sin()).collect(),
            i_samples: (0..n).map(|k| i_peak * (w * t(k) - phi).sin()).collect(),
        }
    }

    #[test]
    fn zero_input_sits_at_midscale() {
        let d = digitize(&window(0.0, 0.0, 0.0, 2), &cfg());
        assert!(d.v_codes.iter().chain(&d.i_codes).all(|&c| c == 512));
        assert!(!d.clipped);
        assert_eq!(windowed_rms(&d, Channel::Voltage, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn full_scale_sine_spans_codes() {
        let c = cfg();
        let v_fs = 2.5 / c.v_sensor_gain;
        let i_fs = 2.5 / c.i_sensor_gain;
        let d = digitize(&window(0.3, v_fs, i_fs, 2), &c);
        assert_eq!(*d.v_codes.iter().min().unwrap(), 0);
        assert_eq!(*d.v_codes.iter().max().unwrap(), 1023);
        assert!(!d.clipped);
        let over = digitize(&window(0.3, v_fs * 1.2, i_fs, 2), &c);
        assert!(over.clipped);
    }

    #[test]
    fn lsb_definition() {
        let d = digitize(&window(0.0, 1.0, 1.0, 2), &cfg());
        assert_eq!(d.lsb_volts, 5.0 / 1024.0);
        assert_eq!(d.midscale(), 512);
    }

    #[test]
    fn in_phase_and_quadrature() {
        let c = cfg();
        let inphase = xor_phase(&digitize(&window(0.0, 300.0, 50.0, 4), &c)).unwrap();
        assert_eq!(inphase.duty, 0.0);
        assert_eq!(inphase.power_factor, 1.0);
        let quad = xor_phase(&digitize(&window(PI / 2.0, 300.0, 50.0, 4), &c)).unwrap();
        assert!((quad.duty - 0.5).abs() < 1e-3, "duty {}", quad.duty);
        assert!(quad.power_factor.abs() < 5e-3);
    }

    #[test]
    fn z1_reading() {
        let c = cfg();
        let phi = 0.87_f64.acos();
        let w = synthesize_waveforms(&c, &RigState::default(), 4).unwrap();
        let x = xor_phase(&digitize(&w, &c)).unwrap();
        assert!((x.duty - phi / PI).abs() < 0.005, "duty {}", x.duty);
        assert!((phi / PI - 0.1641).abs() < 1e-4);
        assert!((x.power_factor - 0.87).abs() < 0.01);
    }

    #[test]
    fn lead_lag_mirror_is_exact() {
        let c = cfg();
        for deg in [5.0, 29.54, 47.0, 80.0] {
            let phi = f64::to_radians(deg);
            let lag = xor_phase(&digitize(&window(phi, 320.0, 52.0, 4), &c)).unwrap();
            let lead = xor_phase(&digitize(&window(-phi, 320.0, 52.0, 4), &c)).unwrap();
            assert_eq!(lag, lead, "phi {deg}");
        }
    }

    #[test]
    fn channel_swap_is_exact() {
        let c = cfg();
        let mut d = digitize(&window(0.7, 320.0, 52.0, 4), &c);
        let a = xor_phase(&d).unwrap();
        std::mem::swap(&mut d.v_codes, &mut d.i_codes);
        assert_eq!(a, xor_phase(&d).unwrap());
    }

    #[test]
    fn degenerate_and_short_windows() {
        let c = cfg();
        let d = digitize(&window(0.3, 320.0, 0.0, 4), &c);
        assert_eq!(xor_phase(&d), Err(SensingError::DegenerateSignal(Channel::Current)));
        let d = digitize(&window(0.3, 320.0, 52.0, 1), &c);
        assert_eq!(xor_phase(&d), Err(SensingError::TooFewCycles(1)));
        let mut e = d.clone();
        e.v_codes.clear();
        e.i_codes.clear();
        assert_eq!(windowed_rms(&e, Channel::Voltage, &c), Err(SensingError::EmptyWindow));
    }

    #[test]
    fn rms_through_chain() {
        let c = cfg();
        let w = synthesize_waveforms(&c, &RigState::default(), 4).unwrap();
        let d = digitize(&w, &c);
        let v = windowed_rms(&d, Channel::Voltage, &c).unwrap();
        let i = windowed_rms(&d, Channel::Current, &c).unwrap();
        // Quantization oracle: the unquantized samples.
        assert!((v / w.v_rms() - 1.0).abs() < 0.005);
        assert!((i / w.i_rms() - 1.0).abs() < 0.005);
        assert!((v / 230.0 - 1.0).abs() < 0.005);

        let half = synthesize_waveforms(&c, &RigState::default().with_variac(0.5), 4).unwrap();
        let vh = windowed_rms(&digitize(&half, &c), Channel::Voltage, &c).unwrap();
        assert!((vh / v - 0.5).abs() < 0.005);
    }

    #[test]
    fn measure_z1_off_and_on() {
        let c = cfg();
        let off = measure(&c, &RigState::default()).unwrap();
        assert!((off.power_factor - 0.87).abs() < 0.01);
        assert!((off.irms - 37.5).abs() < 0.5);
        assert!(!off.capacitor_engaged);
        assert_eq!(off.window_cycles, 4);
        assert!((off.timestamp - 0.08).abs() < 1e-12);
        let on = measure(&c, &RigState::default().with_capacitor(true)).unwrap();
        assert!((on.power_factor - 0.99).abs() < 0.01);
        assert!((on.irms - 32.9).abs() < 0.5);
    }

    #[test]
    fn open_circuit_is_degenerate() {
        let c = RigConfig { load_r: 1e12, ..cfg() };
        assert_eq!(
            measure(&c, &RigState::default()),
            Err(SensingError::DegenerateSignal(Channel::Current))
        );
    }

    #[test]
    fn noise_is_seeded() {
        use rand::SeedableRng;
        let c = cfg();
        let noise = NoiseModel { sigma_volts: 0.01 };
        let run = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            measure_with(&c, &RigState::default(), 4, Some((&noise, &mut rng))).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert!((run(7).power_factor - 0.87).abs() < 0.03);
    }
}
