//! Service configuration file (JSON) with environment overrides.

use std::path::{Path, PathBuf};

use pfclab_core::labmath::{default_cable_table, validate_cable_table};
use pfclab_core::{CableSpec64, RigConfig64, RigState64};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ClockMode, Timestamp};
use crate::error::ServiceError;

pub const ENV_BIND: &str = "PFCLAB_BIND";
pub const ENV_ADMIN_KEY: &str = "PFCLAB_ADMIN_KEY";
pub const DEFAULT_CONFIG_PATH: &str = "lab.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FsyncPolicy {
    /// fsync after every event.
    Always,
    /// fsync on explicit flush and shutdown only.
    #[default]
    OnFlush,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPolicy {
    /// Lets read endpoints answer without a session token.
    pub observer_mode: bool,
    /// Early/late tolerance when checking a claim against its slot window.
    pub claim_grace_s: f64,
    pub slots_file: Option<PathBuf>,
    pub log_file: PathBuf,
    pub fsync: FsyncPolicy,
    /// Per-token request budget; 0 disables limiting.
    pub rate_limit_rps: f64,
    /// Lets the session holder drive the variac; otherwise admin only.
    pub students_may_set_variac: bool,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        Self {
            observer_mode: false,
            claim_grace_s: 30.0,
            slots_file: Some(PathBuf::from("slots.json")),
            log_file: PathBuf::from("session-log.jsonl"),
            fsync: FsyncPolicy::OnFlush,
            rate_limit_rps: 10.0,
            students_may_set_variac: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub settle_delay_s: f64,
    pub window_cycles: u32,
    pub scope_max_cycles: u32,
    /// Gaussian noise at the ADC input, volts; 0 disables.
    pub noise_sigma_v: f64,
    pub noise_seed: u64,
    pub initial_state: RigState64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            settle_delay_s: 0.5,
            window_cycles: pfclab_core::sensing::MEASURE_CYCLES,
            scope_max_cycles: 10,
            noise_sigma_v: 0.0,
            noise_seed: 0,
            initial_state: RigState64::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockSettings {
    pub mode: ClockMode,
    /// Start of simulated time, seconds UTC.
    pub start_utc: Timestamp,
}

impl Default for ClockSettings {
    fn default() -> Self {
        // 2024-01-01T00:00:00Z
        Self { mode: ClockMode::Wall, start_utc: 1_704_067_200.0 }
    }
}

impl ClockSettings {
    pub fn build(&self) -> Clock {
        match self.mode {
            ClockMode::Wall => Clock::Wall,
            ClockMode::Simulated => Clock::simulated(self.start_utc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub bind: String,
    pub admin_key: Option<String>,
    /// Allowed CORS origin for the operator console; `None` allows any.
    pub ui_origin: Option<String>,
    pub rig: RigConfig64,
    pub cables: Vec<CableSpec64>,
    pub controller: ControllerSettings,
    pub session: SessionPolicy,
    pub clock: ClockSettings,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            admin_key: None,
            ui_origin: None,
            rig: RigConfig64::default(),
            cables: default_cable_table(),
            controller: ControllerSettings::default(),
            session: SessionPolicy::default(),
            clock: ClockSettings::default(),
        }
    }
}

impl LabConfig {
    /// Reads and validates a config file. Relative slot/log paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cfg: LabConfig = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.session.log_file);
        if let Some(p) = self.session.slots_file.as_mut() {
            fix(p);
        }
    }

    /// Applies `PFCLAB_BIND` and `PFCLAB_ADMIN_KEY` when set.
    pub fn apply_env(&mut self) {
        self.apply_overrides(std::env::var(ENV_BIND).ok(), std::env::var(ENV_ADMIN_KEY).ok());
    }

    pub fn apply_overrides(&mut self, bind: Option<String>, admin_key: Option<String>) {
        if let Some(b) = bind.filter(|b| !b.is_empty()) {
            self.bind = b;
        }
        if let Some(k) = admin_key.filter(|k| !k.is_empty()) {
            self.admin_key = Some(k);
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.rig.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        validate_cable_table(&self.cables).map_err(|e| ServiceError::Config(e.to_string()))?;
        let c = &self.controller;
        if !(c.settle_delay_s >= 0.0 && c.settle_delay_s.is_finite()) {
            return Err(ServiceError::Config("controller.settle_delay_s must be >= 0".into()));
        }
        if !(2..=pfclab_core::circuit::MAX_SYNTH_CYCLES).contains(&c.window_cycles) {
            return Err(ServiceError::Config("controller.window_cycles must be in [2, 50]".into()));
        }
        if !(1..=pfclab_core::circuit::MAX_SYNTH_CYCLES).contains(&c.scope_max_cycles) {
            return Err(ServiceError::Config("controller.scope_max_cycles must be in [1, 50]".into()));
        }
        if !(self.session.claim_grace_s.is_finite() && self.session.claim_grace_s >= 0.0) {
            return Err(ServiceError::Config("session.claim_grace_s must be >= 0".into()));
        }
        if !(self.session.rate_limit_rps.is_finite() && self.session.rate_limit_rps >= 0.0) {
            return Err(ServiceError::Config("session.rate_limit_rps must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: LabConfig = serde_json::from_str(r#"{"bind": "0.0.0.0:9000", "session": {"observer_mode": true}}"#).unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:9000");
        assert!(cfg.session.observer_mode);
        assert_eq!(cfg.session.claim_grace_s, 30.0);
        assert_eq!(cfg.rig, RigConfig64::default());
        assert_eq!(cfg.cables.len(), 6);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = LabConfig::default();
        cfg.apply_overrides(Some("1.2.3.4:5".into()), Some("k".into()));
        assert_eq!(cfg.bind, "1.2.3.4:5");
        assert_eq!(cfg.admin_key.as_deref(), Some("k"));
        cfg.apply_overrides(Some(String::new()), None);
        assert_eq!(cfg.bind, "1.2.3.4:5");
    }

    #[test]
    fn bad_rig_rejected() {
        let mut cfg = LabConfig::default();
        cfg.rig.adc_bits = 4;
        assert!(matches!(cfg.validate(), Err(ServiceError::Config(_))));
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lab.json");
        std::fs::write(&p, r#"{"session": {"log_file": "logs/a.jsonl"}}"#).unwrap();
        let cfg = LabConfig::load(&p).unwrap();
        assert_eq!(cfg.session.log_file, dir.path().join("logs/a.jsonl"));
        assert!(matches!(LabConfig::load(&dir.path().join("missing.json")), Err(ServiceError::Io(_))));
        std::fs::write(&p, "{").unwrap();
        assert!(matches!(LabConfig::load(&p), Err(ServiceError::Config(_))));
    }

    #[test]
    fn example_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../lab.example.json");
        let cfg = LabConfig::load(&path).unwrap();
        assert_eq!(cfg.admin_key.as_deref(), Some("change-me"));
        assert_eq!(cfg.rig, RigConfig64::default());
        assert!(cfg.session.log_file.is_absolute());
    }
}
