//! Rig controller, session arbiter, event log and HTTP/WebSocket gateway
//! for the remote power-factor-correction lab.

pub mod clock;
pub mod config;
pub mod error;
pub mod eventlog;
pub mod gateway;
pub mod lab;
pub mod rig;
pub mod server;
pub mod session;

pub use clock::{Clock, ClockMode, Timestamp};
pub use config::{LabConfig, SessionPolicy};
pub use error::{RigError, ServiceError, SessionError};
pub use eventlog::{read_events, replay, replay_session, EventKind, EventLog, LogEvent};
pub use gateway::router;
pub use lab::Lab;
pub use rig::{LoopEvent, RigController};
pub use server::{serve, shutdown_signal};
pub use session::{Authorization, SessionService, SessionSlot, SessionToken};
