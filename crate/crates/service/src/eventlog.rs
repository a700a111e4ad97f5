//! Append-only JSONL session log.
//!
//! Writes happen on a dedicated thread behind a channel so that a slow or
//! failing disk never stalls rig control; a storage failure flips the log
//! into a degraded state that is reported through the health endpoint.
//! Tokens and claim codes are never written.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use pfclab_core::RigState64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::config::FsyncPolicy;
use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Claim,
    Command,
    Frame,
    Scope,
    Release,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Claim => "claim",
            EventKind::Command => "command",
            EventKind::Frame => "frame",
            EventKind::Scope => "scope",
            EventKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub ts: Timestamp,
    pub session: Option<String>,
    pub kind: EventKind,
    /// Always carries `sim_time`, the rig clock in seconds.
    pub payload: Value,
}

impl LogEvent {
    pub fn sim_time(&self) -> Option<f64> {
        self.payload.get("sim_time").and_then(Value::as_f64)
    }
}

enum Msg {
    Event(Box<LogEvent>),
    Flush(SyncSender<bool>),
    Stop,
}

pub struct EventLog {
    tx: Mutex<Sender<Msg>>,
    degraded: Arc<AtomicBool>,
    worker: Mutex<Option<JoinHandle<()>>>,
    path: PathBuf,
}

fn open_append(path: &Path) -> std::io::Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    OpenOptions::new().create(true).append(true).open(path)
}

fn writer_loop(path: PathBuf, policy: FsyncPolicy, rx: Receiver<Msg>, degraded: Arc<AtomicBool>) {
    let mut out = match open_append(&path) {
        Ok(f) => Some(BufWriter::new(f)),
        Err(e) => {
            tracing::error!(path = %path.display(), error = %e, "event log unavailable");
            degraded.store(true, Ordering::SeqCst);
            None
        }
    };
    let fail = |e: std::io::Error| {
        if !degraded.swap(true, Ordering::SeqCst) {
            tracing::error!(path = %path.display(), error = %e, "event log write failed");
        }
    };
    let sync = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.flush()?;
        if policy != FsyncPolicy::Never {
            w.get_ref().sync_data()?;
        }
        Ok(())
    };
    while let Ok(first) = rx.recv() {
        let mut next = Some(first);
        while let Some(msg) = next.take() {
            match msg {
                Msg::Event(ev) => {
                    if let Some(w) = out.as_mut() {
                        let line = serde_json::to_string(&ev).expect("log events serialize");
                        let res = writeln!(w, "{line}").and_then(|_| {
                            if policy == FsyncPolicy::Always {
                                sync(w)
                            } else {
                                Ok(())
                            }
                        });
                        if let Err(e) = res {
                            fail(e);
                        }
                    }
                }
                Msg::Flush(ack) => {
                    if let Some(w) = out.as_mut() {
                        if let Err(e) = sync(w) {
                            fail(e);
                        }
                    }
                    let _ = ack.send(!degraded.load(Ordering::SeqCst));
                }
                Msg::Stop => {
                    if let Some(w) = out.as_mut() {
                        if let Err(e) = sync(w) {
                            fail(e);
                        }
                    }
                    return;
                }
            }
            next = rx.try_recv().ok();
        }
        if let Some(w) = out.as_mut() {
            if let Err(e) = w.flush() {
                fail(e);
            }
        }
    }
}

impl EventLog {
    pub fn open(path: &Path, policy: FsyncPolicy) -> Self {
        let (tx, rx) = mpsc::channel();
        let degraded = Arc::new(AtomicBool::new(false));
        let worker = {
            let degraded = Arc::clone(&degraded);
            let path = path.to_path_buf();
            std::thread::Builder::new()
                .name("pfclab-eventlog".into())
                .spawn(move || writer_loop(path, policy, rx, degraded))
                .expect("spawn log writer")
        };
        Self { tx: Mutex::new(tx), degraded, worker: Mutex::new(Some(worker)), path: path.to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: LogEvent) {
        let tx = self.tx.lock().unwrap_or_else(|p| p.into_inner());
        if tx.send(Msg::Event(Box::new(event))).is_err() {
            self.degraded.store(true, Ordering::SeqCst);
        }
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::SeqCst)
    }

    /// Blocks until every event appended so far has reached the file.
    /// Returns false when the log is degraded.
    pub fn flush(&self) -> bool {
        let (ack_tx, ack_rx) = mpsc::sync_channel(1);
        {
            let tx = self.tx.lock().unwrap_or_else(|p| p.into_inner());
            if tx.send(Msg::Flush(ack_tx)).is_err() {
                return false;
            }
        }
        ack_rx.recv_timeout(Duration::from_secs(10)).unwrap_or(false)
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        if let Ok(tx) = self.tx.lock() {
            let _ = tx.send(Msg::Stop);
        }
        if let Some(h) = self.worker.lock().ok().and_then(|mut w| w.take()) {
            let _ = h.join();
        }
    }
}

/// Reads a log file. A torn final line (crash mid-write) is ignored.
pub fn read_events(path: &Path) -> Result<Vec<LogEvent>, ServiceError> {
    let file = File::open(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut events = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) if Some(n) == last => break,
            Err(e) => return Err(ServiceError::Log(format!("{}:{}: {e}", path.display(), n + 1))),
        }
    }
    Ok(events)
}

/// Admits at most one frame per wall second: the first frame, then the
/// first frame at or after the next whole second.
#[derive(Debug, Clone, Default)]
pub struct FrameDecimator {
    next: Option<f64>,
}

impl FrameDecimator {
    pub fn admit(&mut self, ts: Timestamp) -> bool {
        match self.next {
            Some(n) if ts < n => false,
            _ => {
                self.next = Some(ts.floor() + 1.0);
                true
            }
        }
    }
}

pub fn relay_payload(sim_time: f64, engaged: bool) -> Value {
    serde_json::json!({ "sim_time": sim_time, "command": "relay", "engaged": engaged })
}

pub fn variac_payload(sim_time: f64, fraction: f64) -> Value {
    serde_json::json!({ "sim_time": sim_time, "command": "variac", "fraction": fraction })
}

/// Applies a command event to a state; other events only move `sim_time`.
pub fn apply_event(state: RigState64, event: &LogEvent) -> RigState64 {
    let mut next = state;
    if event.kind == EventKind::Command {
        let p = &event.payload;
        match p.get("command").and_then(Value::as_str) {
            Some("relay") => {
                if let Some(b) = p.get("engaged").and_then(Value::as_bool) {
                    next = next.with_capacitor(b);
                }
            }
            Some("variac") => {
                if let Some(f) = p.get("fraction").and_then(Value::as_f64) {
                    next = next.with_variac(f);
                }
            }
            _ => {}
        }
    }
    if let Some(t) = event.sim_time() {
        if t > next.sim_time {
            next.sim_time = t;
        }
    }
    next
}

pub fn replay(initial: RigState64, events: &[LogEvent]) -> RigState64 {
    events.iter().fold(initial, apply_event)
}

/// Rebuilds the rig state at the end of one session: starts from the state
/// recorded in its claim and folds its events up to its release.
pub fn replay_session(events: &[LogEvent], session: &str) -> Option<RigState64> {
    let mine = |e: &&LogEvent| e.session.as_deref() == Some(session);
    let start = events.iter().position(|e| e.kind == EventKind::Claim && mine(&e))?;
    let initial: RigState64 = serde_json::from_value(events[start].payload.get("state")?.clone()).ok()?;
    let mut state = apply_event(initial, &events[start]);
    for e in events[start + 1..].iter().filter(mine) {
        state = apply_event(state, e);
        if e.kind == EventKind::Release {
            break;
        }
    }
    Some(state)
}
