//! Reserved time slots and the single live session token.
//!
//! Every mutation goes through one arbiter lock; authorization reads the
//! current token through an atomic snapshot and never takes the lock.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::SessionError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSlot {
    pub slot_id: String,
    pub student_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub claim_code: String,
}

impl SessionSlot {
    fn overlaps(&self, start: Timestamp, end: Timestamp) -> bool {
        start < self.end && self.start < end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub slot_id: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Missing,
    Unknown,
    Expired,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Missing => "missing",
            DenyReason::Unknown => "unknown",
            DenyReason::Expired => "expired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Authorization {
    Allow { slot_id: String },
    Deny(DenyReason),
}

impl Authorization {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Authorization::Allow { .. })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SlotFile {
    next_id: u64,
    slots: Vec<SessionSlot>,
}

struct Arbiter {
    file: SlotFile,
    path: Option<PathBuf>,
}

impl Arbiter {
    fn persist(&self) -> Result<(), SessionError> {
        let Some(path) = &self.path else { return Ok(()) };
        let text = serde_json::to_string_pretty(&self.file).map_err(|e| SessionError::Store(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| SessionError::Store(e.to_string()))?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| SessionError::Store(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| SessionError::Store(e.to_string()))
    }
}

pub fn random_secret() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct SessionService {
    arbiter: Mutex<Arbiter>,
    active: ArcSwapOption<SessionToken>,
    claim_grace_s: f64,
}

impl SessionService {
    pub fn in_memory(claim_grace_s: f64) -> Self {
        Self {
            arbiter: Mutex::new(Arbiter { file: SlotFile { next_id: 1, slots: Vec::new() }, path: None }),
            active: ArcSwapOption::empty(),
            claim_grace_s,
        }
    }

    /// Opens (or starts) a slot file. A missing file is an empty store.
    pub fn open(path: &Path, claim_grace_s: f64) -> Result<Self, SessionError> {
        let file = match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| SessionError::Store(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => SlotFile { next_id: 1, slots: Vec::new() },
            Err(e) => return Err(SessionError::Store(format!("{}: {e}", path.display()))),
        };
        Ok(Self {
            arbiter: Mutex::new(Arbiter { file, path: Some(path.to_path_buf()) }),
            active: ArcSwapOption::empty(),
            claim_grace_s,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Arbiter> {
        self.arbiter.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create_slot(&self, student_id: &str, start: Timestamp, end: Timestamp) -> Result<SessionSlot, SessionError> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(SessionError::InvalidInterval);
        }
        let mut arb = self.lock();
        if let Some(clash) = arb.file.slots.iter().find(|s| s.overlaps(start, end)) {
            return Err(SessionError::Overlap(clash.slot_id.clone()));
        }
        let id = arb.file.next_id.max(1);
        let slot = SessionSlot {
            slot_id: format!("slot-{id:04}"),
            student_id: student_id.to_string(),
            start,
            end,
            claim_code: random_secret(),
        };
        arb.file.next_id = id + 1;
        arb.file.slots.push(slot.clone());
        arb.file.slots.sort_by(|a, b| a.start.total_cmp(&b.start));
        if let Err(e) = arb.persist() {
            arb.file.slots.retain(|s| s.slot_id != slot.slot_id);
            return Err(e);
        }
        Ok(slot)
    }

    pub fn list(&self) -> Vec<SessionSlot> {
        self.lock().file.slots.clone()
    }

    pub fn slot(&self, slot_id: &str) -> Option<SessionSlot> {
        self.lock().file.slots.iter().find(|s| s.slot_id == slot_id).cloned()
    }

    /// Removes a slot; an active session on it is released.
    pub fn revoke(&self, slot_id: &str) -> Result<SessionSlot, SessionError> {
        let mut arb = self.lock();
        let idx = arb
            .file
            .slots
            .iter()
            .position(|s| s.slot_id == slot_id)
            .ok_or_else(|| SessionError::UnknownSlot(slot_id.to_string()))?;
        let slot = arb.file.slots.remove(idx);
        if let Err(e) = arb.persist() {
            arb.file.slots.insert(idx, slot);
            return Err(e);
        }
        if self.active.load().as_ref().is_some_and(|t| t.slot_id == slot_id) {
            self.active.store(None);
        }
        Ok(slot)
    }

    pub fn claim(&self, claim_code: &str, now: Timestamp) -> Result<SessionToken, SessionError> {
        let arb = self.lock();
        let slot = arb
            .file
            .slots
            .iter()
            .find(|s| s.claim_code == claim_code)
            .ok_or(SessionError::UnknownCode)?;
        if now < slot.start - self.claim_grace_s || now >= slot.end {
            return Err(SessionError::NotYourTime);
        }
        if let Some(current) = self.active.load_full() {
            if now < current.expires_at {
                return Err(if current.slot_id == slot.slot_id {
                    SessionError::AlreadyClaimed
                } else {
                    SessionError::RigBusy
                });
            }
        }
        let token = SessionToken {
            token: random_secret(),
            slot_id: slot.slot_id.clone(),
            issued_at: now,
            expires_at: slot.end,
        };
        self.active.store(Some(Arc::new(token.clone())));
        Ok(token)
    }

    /// Lock-free check of a presented token.
    pub fn authorize(&self, token: Option<&str>, now: Timestamp) -> Authorization {
        let Some(token) = token else { return Authorization::Deny(DenyReason::Missing) };
        match self.active.load().as_ref() {
            Some(t) if t.token == token => {
                if now < t.expires_at {
                    Authorization::Allow { slot_id: t.slot_id.clone() }
                } else {
                    Authorization::Deny(DenyReason::Expired)
                }
            }
            _ => Authorization::Deny(DenyReason::Unknown),
        }
    }

    /// Releases the session held by `token`; `None` if it was not active.
    pub fn release(&self, token: &str) -> Option<SessionToken> {
        let _arb = self.lock();
        let current = self.active.load_full()?;
        if current.token != token {
            return None;
        }
        self.active.store(None);
        Some((*current).clone())
    }

    /// Drops the active token once its slot has ended.
    pub fn reap_expired(&self, now: Timestamp) -> Option<SessionToken> {
        let current = self.active.load_full()?;
        if now < current.expires_at {
            return None;
        }
        let _arb = self.lock();
        let again = self.active.load_full()?;
        if !Arc::ptr_eq(&again, &current) {
            return None;
        }
        self.active.store(None);
        Some((*current).clone())
    }

    /// Slot id of the session holding the rig at `now`.
    pub fn current_session(&self, now: Timestamp) -> Option<String> {
        self.active
            .load()
            .as_ref()
            .filter(|t| now < t.expires_at)
            .map(|t| t.slot_id.clone())
    }
}
