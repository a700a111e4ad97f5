//! Single owner of the rig state: relay and variac commands, the periodic
//! measurement loop and scope captures.
//!
//! Time is kept in integer microseconds so that simulated runs are exactly
//! reproducible. The loop measures consecutive windows of
//! `window_cycles / frequency` seconds; a window that starts before the end
//! of a settle period is suppressed rather than reported, so no frame ever
//! mixes two committed states.

use pfclab_core::circuit::synthesize_waveforms;
use pfclab_core::sensing::{measure_with, NoiseModel};
use pfclab_core::{MeasurementFrame64, RigConfig64, RigState64, SensingError, WaveformWindow64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clock::{micros_to_secs, secs_to_micros};
use crate::config::ControllerSettings;
use crate::error::RigError;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LoopEvent {
    Frame(MeasurementFrame64),
    /// Window overlapped a settle period and was dropped.
    Suppressed { timestamp: f64 },
    /// The chain could not produce a reading for this window.
    Degenerate { timestamp: f64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommandOutcome {
    pub state: RigState64,
    /// False when the command matched the current state.
    pub changed: bool,
}

pub struct RigController {
    config: RigConfig64,
    settings: ControllerSettings,
    state: RigState64,
    now_us: i64,
    next_window_us: i64,
    window_us: i64,
    settle_us: i64,
    settle_until_us: i64,
    scope_free_us: i64,
    latest: Option<MeasurementFrame64>,
    last_error: Option<String>,
    noise: Option<(NoiseModel<f64>, ChaCha8Rng)>,
}

impl RigController {
    pub fn new(config: RigConfig64, settings: ControllerSettings) -> Result<Self, RigError> {
        config.validate()?;
        let window_us = secs_to_micros(settings.window_cycles as f64 / config.frequency);
        let settle_us = secs_to_micros(settings.settle_delay_s);
        let noise = (settings.noise_sigma_v > 0.0).then(|| {
            (NoiseModel { sigma_volts: settings.noise_sigma_v }, ChaCha8Rng::seed_from_u64(settings.noise_seed))
        });
        let mut state = settings.initial_state;
        state.sim_time = 0.0;
        Ok(Self {
            config,
            state,
            now_us: 0,
            next_window_us: 0,
            window_us,
            settle_us,
            settle_until_us: 0,
            scope_free_us: 0,
            latest: None,
            last_error: None,
            noise,
            settings,
        })
    }

    pub fn config(&self) -> &RigConfig64 {
        &self.config
    }

    pub fn state(&self) -> RigState64 {
        self.state
    }

    pub fn now_us(&self) -> i64 {
        self.now_us
    }

    pub fn window_us(&self) -> i64 {
        self.window_us
    }

    pub fn is_settling(&self) -> bool {
        self.now_us < self.settle_until_us
    }

    /// Latest frame not affected by a settle period.
    pub fn latest_frame(&self) -> Option<MeasurementFrame64> {
        self.latest
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    fn commit(&mut self, next: RigState64) -> CommandOutcome {
        let changed = next.capacitor_engaged != self.state.capacitor_engaged
            || next.variac_fraction != self.state.variac_fraction
            || next.load_fraction != self.state.load_fraction;
        if changed {
            self.state = next;
            self.settle_until_us = self.settle_until_us.max(self.now_us + self.settle_us);
        }
        CommandOutcome { state: self.state, changed }
    }

    pub fn set_capacitor(&mut self, engaged: bool) -> CommandOutcome {
        let next = self.state.with_capacitor(engaged);
        self.commit(next)
    }

    pub fn set_variac(&mut self, fraction: f64) -> Result<CommandOutcome, RigError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(RigError::FractionOutOfRange(fraction));
        }
        let next = self.state.with_variac(fraction);
        Ok(self.commit(next))
    }

    /// Acquires `cycles` of both traces. Acquisitions are sequential, so a
    /// capture never starts before the previous one ended.
    pub fn capture_scope(&mut self, cycles: u32) -> Result<WaveformWindow64, RigError> {
        let max = self.settings.scope_max_cycles;
        if !(1..=max).contains(&cycles) {
            return Err(RigError::ScopeDepth { got: cycles, max });
        }
        let t0_us = self.now_us.max(self.scope_free_us);
        let window = synthesize_waveforms(&self.config, &self.state.at_time(micros_to_secs(t0_us)), cycles)?;
        self.scope_free_us = t0_us + secs_to_micros(cycles as f64 / self.config.frequency);
        Ok(window)
    }

    /// Runs the measurement loop forward by `dt_us` and returns one event
    /// per completed window.
    pub fn advance(&mut self, dt_us: i64) -> Vec<LoopEvent> {
        self.now_us += dt_us.max(0);
        self.state.sim_time = micros_to_secs(self.now_us);
        let mut events = Vec::new();
        while self.next_window_us + self.window_us <= self.now_us {
            let start = self.next_window_us;
            self.next_window_us += self.window_us;
            events.push(self.measure_window(start));
        }
        events
    }

    fn measure_window(&mut self, start_us: i64) -> LoopEvent {
        let end = micros_to_secs(start_us + self.window_us);
        if start_us < self.settle_until_us {
            return LoopEvent::Suppressed { timestamp: end };
        }
        let at = RigState64 { sim_time: micros_to_secs(start_us), ..self.state };
        let cycles = self.settings.window_cycles;
        let result = match self.noise.as_mut() {
            Some((model, rng)) => measure_with(&self.config, &at, cycles, Some((&*model, rng))),
            None => measure_with(&self.config, &at, cycles, None::<(&NoiseModel<f64>, &mut ChaCha8Rng)>),
        };
        match result {
            Ok(mut frame) => {
                frame.timestamp = end;
                self.latest = Some(frame);
                self.last_error = None;
                LoopEvent::Frame(frame)
            }
            Err(e) => {
                let reason = match e {
                    SensingError::DegenerateSignal(ch) => format!("degenerate_signal:{ch}"),
                    other => other.to_string(),
                };
                self.last_error = Some(reason.clone());
                LoopEvent::Degenerate { timestamp: end, reason }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> RigController {
        RigController::new(RigConfig64::default(), ControllerSettings::default()).unwrap()
    }

    fn frames(ev: &[LoopEvent]) -> Vec<MeasurementFrame64> {
        ev.iter()
            .filter_map(|e| match e {
                LoopEvent::Frame(f) => Some(*f),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn one_second_yields_twelve_frames() {
        let mut r = rig();
        let ev = r.advance(1_000_000);
        // 1 / 0.08 = 12.5 windows.
        assert!(ev.len() == 12 || ev.len() == 13);
        let f = frames(&ev);
        assert_eq!(f.len(), ev.len());
        assert!(f.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    }

    #[test]
    fn relay_toggle_suppresses_seven_frames() {
        let mut r = rig();
        r.advance(800_000);
        let out = r.set_capacitor(true);
        assert!(out.changed);
        assert!(r.is_settling());
        let ev = r.advance(2_000_000);
        let suppressed = ev.iter().filter(|e| matches!(e, LoopEvent::Suppressed { .. })).count();
        assert_eq!(suppressed, (0.5f64 / 0.08).ceil() as usize);
        assert!(ev[..suppressed].iter().all(|e| matches!(e, LoopEvent::Suppressed { .. })));
        let after = frames(&ev);
        assert!(after.iter().all(|f| f.capacitor_engaged));
        assert!((after[0].power_factor - 0.99).abs() < 0.01);
        assert!(!r.is_settling());
    }

    #[test]
    fn idempotent_relay_has_no_gap() {
        let mut r = rig();
        r.set_capacitor(true);
        r.advance(1_000_000);
        let out = r.set_capacitor(true);
        assert!(!out.changed);
        assert!(!r.is_settling());
        let ev = r.advance(400_000);
        assert!(ev.iter().all(|e| matches!(e, LoopEvent::Frame(_))));
    }

    #[test]
    fn rapid_toggles_never_mix_states() {
        let mut r = rig();
        r.advance(400_000);
        r.set_capacitor(true);
        let a = r.advance(80_000);
        r.set_capacitor(false);
        let b = r.advance(160_000);
        r.set_capacitor(false);
        let c = r.advance(2_000_000);
        assert!(a.iter().chain(&b).all(|e| matches!(e, LoopEvent::Suppressed { .. })));
        assert!(!r.state().capacitor_engaged);
        let f = frames(&c);
        assert!(!f.is_empty());
        assert!(f.iter().all(|f| !f.capacitor_engaged && (f.power_factor - 0.87).abs() < 0.01));
    }

    #[test]
    fn variac_scales_voltage() {
        let mut r = rig();
        let full = frames(&r.advance(80_000))[0];
        assert!((full.vrms / 230.0 - 1.0).abs() < 0.005);
        r.set_variac(0.5).unwrap();
        let ev = r.advance(1_000_000);
        let half = *frames(&ev).last().unwrap();
        assert!((half.vrms / 115.0 - 1.0).abs() < 0.005);
        assert_eq!(r.set_variac(1.5), Err(RigError::FractionOutOfRange(1.5)));
        assert!(r.set_variac(0.0).is_err());
        assert_eq!(r.state().variac_fraction, 0.5);
    }

    #[test]
    fn scope_capture_depth_and_t0() {
        let mut r = rig();
        let w = r.capture_scope(2).unwrap();
        assert_eq!(w.len(), 400);
        let w2 = r.capture_scope(2).unwrap();
        assert!(w2.t0 > w.t0);
        r.advance(10_000);
        let w3 = r.capture_scope(1).unwrap();
        assert!(w3.t0 > w2.t0);
        assert!(matches!(r.capture_scope(0), Err(RigError::ScopeDepth { .. })));
        assert!(matches!(r.capture_scope(11), Err(RigError::ScopeDepth { .. })));
        let lag = r.capture_scope(4).unwrap().zero_crossing_lag().unwrap().to_degrees();
        assert!((lag - 29.5).abs() <= 1.8, "lag {lag}");
    }

    #[test]
    fn simulated_loop_is_deterministic() {
        let run = || {
            let mut r = rig();
            let mut out = r.advance(500_000);
            r.set_capacitor(true);
            out.extend(r.advance(1_300_000));
            r.set_variac(0.7).unwrap();
            out.extend(r.advance(900_000));
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn open_circuit_reports_degenerate() {
        let cfg = RigConfig64 { load_r: 1e12, ..RigConfig64::default() };
        let mut r = RigController::new(cfg, ControllerSettings::default()).unwrap();
        let ev = r.advance(80_000);
        assert!(matches!(&ev[0], LoopEvent::Degenerate { reason, .. } if reason == "degenerate_signal:current"));
        assert!(r.latest_frame().is_none());
        assert!(r.last_error().is_some());
    }
}
