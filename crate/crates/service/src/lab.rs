//! The running lab: one rig, one session arbiter, one event log, one clock.
//!
//! Every operation that changes rig or session state runs under the rig
//! lock, so the log records commands in the order they took effect.

use std::sync::{Arc, Mutex, MutexGuard};

use pfclab_core::{MeasurementFrame64, RigState64, WaveformWindow64};
use serde_json::json;
use tokio::sync::watch;

use crate::clock::{micros_to_secs, secs_to_micros, Clock, ClockMode, Timestamp};
use crate::config::LabConfig;
use crate::error::{RigError, ServiceError, SessionError};
use crate::eventlog::{relay_payload, variac_payload, EventKind, EventLog, FrameDecimator, LogEvent};
use crate::rig::{CommandOutcome, LoopEvent, RigController};
use crate::session::{Authorization, DenyReason, SessionService, SessionToken};

struct RigCell {
    ctl: RigController,
    decimator: FrameDecimator,
}

pub struct Lab {
    config: LabConfig,
    rig: Mutex<RigCell>,
    sessions: SessionService,
    log: EventLog,
    clock: Clock,
    /// UTC instant of rig time zero.
    epoch: Timestamp,
    tick: watch::Sender<i64>,
}

impl Lab {
    pub fn new(config: LabConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let ctl = RigController::new(config.rig, config.controller.clone())
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let sessions = match &config.session.slots_file {
            Some(p) => SessionService::open(p, config.session.claim_grace_s).map_err(|e| ServiceError::Io(e.to_string()))?,
            None => SessionService::in_memory(config.session.claim_grace_s),
        };
        let log = EventLog::open(&config.session.log_file, config.session.fsync);
        let clock = config.clock.build();
        let epoch = clock.now();
        let (tick, _) = watch::channel(0);
        Ok(Arc::new(Self {
            rig: Mutex::new(RigCell { ctl, decimator: FrameDecimator::default() }),
            sessions,
            log,
            clock,
            epoch,
            tick,
            config,
        }))
    }

    fn lock(&self) -> MutexGuard<'_, RigCell> {
        self.rig.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn config(&self) -> &LabConfig {
        &self.config
    }

    pub fn sessions(&self) -> &SessionService {
        &self.sessions
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock.mode()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Notified with the rig time (µs) after every loop step.
    pub fn subscribe_ticks(&self) -> watch::Receiver<i64> {
        self.tick.subscribe()
    }

    pub fn is_degraded(&self) -> bool {
        self.log.is_degraded()
    }

    pub fn flush(&self) -> bool {
        self.log.flush()
    }

    fn target_rig_us(&self) -> i64 {
        match &self.clock {
            Clock::Simulated { elapsed_us, .. } => elapsed_us.load(std::sync::atomic::Ordering::SeqCst),
            Clock::Wall => secs_to_micros(self.clock.now() - self.epoch),
        }
    }

    fn emit(&self, kind: EventKind, session: Option<String>, payload: serde_json::Value) {
        self.log.append(LogEvent { ts: self.clock.now(), session, kind, payload });
    }

    fn log_release(&self, tok: &SessionToken, sim_time: f64, reason: &str) {
        self.emit(
            EventKind::Release,
            Some(tok.slot_id.clone()),
            json!({ "sim_time": sim_time, "reason": reason }),
        );
    }

    fn reap_locked(&self, cell: &RigCell) {
        if let Some(tok) = self.sessions.reap_expired(self.clock.now()) {
            self.log_release(&tok, cell.ctl.state().sim_time, "expired");
        }
    }

    /// Brings the rig loop up to the clock and logs decimated frames.
    pub fn sync(&self) -> Vec<LoopEvent> {
        let mut cell = self.lock();
        let dt = self.target_rig_us() - cell.ctl.now_us();
        let events = if dt > 0 { cell.ctl.advance(dt) } else { Vec::new() };
        let session = self.sessions.current_session(self.clock.now());
        for ev in &events {
            if let LoopEvent::Frame(f) = ev {
                let ts = self.to_utc(f.timestamp);
                if cell.decimator.admit(ts) {
                    let mut payload = serde_json::to_value(f).expect("frames serialize");
                    payload["sim_time"] = json!(f.timestamp);
                    self.log.append(LogEvent { ts, session: session.clone(), kind: EventKind::Frame, payload });
                }
            }
        }
        self.reap_locked(&cell);
        let now_us = cell.ctl.now_us();
        drop(cell);
        self.tick.send_replace(now_us);
        events
    }

    /// Moves a simulated clock and the rig loop forward together.
    pub fn advance(&self, seconds: f64) -> Result<Vec<LoopEvent>, ServiceError> {
        if self.clock.mode() != ClockMode::Simulated {
            return Err(ServiceError::Config("clock is not simulated".into()));
        }
        if !(seconds.is_finite() && seconds >= 0.0) {
            return Err(ServiceError::Config("seconds must be a finite value >= 0".into()));
        }
        self.clock.advance_us(secs_to_micros(seconds));
        Ok(self.sync())
    }

    /// Converts rig time (seconds) to UTC.
    pub fn to_utc(&self, rig_time: f64) -> Timestamp {
        self.epoch + rig_time
    }

    /// Rig time in seconds.
    pub fn sim_time(&self) -> f64 {
        micros_to_secs(self.lock().ctl.now_us())
    }

    pub fn state(&self) -> RigState64 {
        self.lock().ctl.state()
    }

    pub fn is_settling(&self) -> bool {
        self.lock().ctl.is_settling()
    }

    /// Latest measurement and whether a settle period is in progress.
    pub fn latest(&self) -> Result<(MeasurementFrame64, bool), Option<String>> {
        let cell = self.lock();
        match (cell.ctl.last_error(), cell.ctl.latest_frame()) {
            (Some(e), _) => Err(Some(e.to_string())),
            (None, Some(f)) => Ok((f, cell.ctl.is_settling())),
            (None, None) => Err(None),
        }
    }

    pub fn authorize(&self, token: Option<&str>) -> Authorization {
        let auth = self.sessions.authorize(token, self.clock.now());
        if auth == Authorization::Deny(DenyReason::Expired) {
            let cell = self.lock();
            self.reap_locked(&cell);
        }
        auth
    }

    pub fn claim(&self, claim_code: &str) -> Result<SessionToken, SessionError> {
        let cell = self.lock();
        self.reap_locked(&cell);
        let tok = self.sessions.claim(claim_code, self.clock.now())?;
        let student = self.sessions.slot(&tok.slot_id).map(|s| s.student_id);
        self.emit(
            EventKind::Claim,
            Some(tok.slot_id.clone()),
            json!({ "sim_time": cell.ctl.state().sim_time, "student_id": student, "state": cell.ctl.state() }),
        );
        Ok(tok)
    }

    pub fn release(&self, token: &str) -> bool {
        let cell = self.lock();
        match self.sessions.release(token) {
            Some(tok) => {
                self.log_release(&tok, cell.ctl.state().sim_time, "released");
                true
            }
            None => false,
        }
    }

    pub fn revoke(&self, slot_id: &str) -> Result<(), SessionError> {
        let cell = self.lock();
        let held = self.sessions.current_session(self.clock.now()).filter(|s| s == slot_id);
        self.sessions.revoke(slot_id)?;
        if held.is_some() {
            self.emit(
                EventKind::Release,
                held,
                json!({ "sim_time": cell.ctl.state().sim_time, "reason": "revoked" }),
            );
        }
        Ok(())
    }

    pub fn set_capacitor(&self, engaged: bool) -> CommandOutcome {
        let mut cell = self.lock();
        let out = cell.ctl.set_capacitor(engaged);
        let session = self.sessions.current_session(self.clock.now());
        self.emit(EventKind::Command, session, relay_payload(out.state.sim_time, engaged));
        out
    }

    pub fn set_variac(&self, fraction: f64) -> Result<CommandOutcome, RigError> {
        let mut cell = self.lock();
        let out = cell.ctl.set_variac(fraction)?;
        let session = self.sessions.current_session(self.clock.now());
        self.emit(EventKind::Command, session, variac_payload(out.state.sim_time, fraction));
        Ok(out)
    }

    pub fn capture_scope(&self, cycles: u32) -> Result<WaveformWindow64, RigError> {
        let mut cell = self.lock();
        let w = cell.ctl.capture_scope(cycles)?;
        let session = self.sessions.current_session(self.clock.now());
        self.emit(
            EventKind::Scope,
            session,
            json!({ "sim_time": cell.ctl.state().sim_time, "cycles": cycles, "t0": w.t0 }),
        );
        Ok(w)
    }

    pub fn window_period_us(&self) -> i64 {
        self.lock().ctl.window_us()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ClockMode;
    use crate::eventlog::{read_events, replay_session};

    fn lab(dir: &std::path::Path) -> Arc<Lab> {
        let mut cfg = LabConfig::default();
        cfg.clock.mode = ClockMode::Simulated;
        cfg.session.slots_file = None;
        cfg.session.log_file = dir.join("log.jsonl");
        Lab::new(cfg).unwrap()
    }

    #[test]
    fn simulated_advance_drives_frames_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let lab = lab(dir.path());
        assert_eq!(lab.latest(), Err(None));
        let ev = lab.advance(3.0).unwrap();
        assert_eq!(ev.len(), 37);
        let (f, stale) = lab.latest().unwrap();
        assert!(!stale);
        assert!((f.power_factor - 0.87).abs() < 0.01);
        assert!(lab.flush());
        let frames = read_events(&dir.path().join("log.jsonl")).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|e| e.kind == EventKind::Frame && e.sim_time().is_some()));
    }

    #[test]
    fn session_lifecycle_is_logged_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let lab = lab(dir.path());
        let now = lab.now();
        let slot = lab.sessions().create_slot("alice", now, now + 60.0).unwrap();
        let tok = lab.claim(&slot.claim_code).unwrap();
        assert!(lab.authorize(Some(&tok.token)).is_allowed());
        lab.advance(1.0).unwrap();
        lab.set_capacitor(true);
        lab.advance(1.0).unwrap();
        lab.set_variac(0.6).unwrap();
        lab.capture_scope(2).unwrap();
        lab.advance(0.3).unwrap();
        assert!(lab.release(&tok.token));
        assert!(!lab.release(&tok.token));
        let final_state = lab.state();
        lab.flush();
        let events = read_events(&dir.path().join("log.jsonl")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert!(!text.contains(&tok.token));
        assert!(!text.contains(&slot.claim_code));
        assert_eq!(replay_session(&events, &slot.slot_id), Some(final_state));
    }

    #[test]
    fn expiry_releases_the_rig() {
        let dir = tempfile::tempdir().unwrap();
        let lab = lab(dir.path());
        let now = lab.now();
        let slot = lab.sessions().create_slot("alice", now, now + 2.0).unwrap();
        let tok = lab.claim(&slot.claim_code).unwrap();
        lab.advance(2.5).unwrap();
        assert_eq!(lab.authorize(Some(&tok.token)), Authorization::Deny(DenyReason::Unknown));
        lab.flush();
        let events = read_events(&dir.path().join("log.jsonl")).unwrap();
        let rel: Vec<_> = events.iter().filter(|e| e.kind == EventKind::Release).collect();
        assert_eq!(rel.len(), 1);
        assert_eq!(rel[0].payload["reason"], "expired");
    }

    #[test]
    fn wall_clock_rejects_advance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = LabConfig::default();
        cfg.session.slots_file = None;
        cfg.session.log_file = dir.path().join("log.jsonl");
        let lab = Lab::new(cfg).unwrap();
        assert!(lab.advance(1.0).is_err());
    }
}
