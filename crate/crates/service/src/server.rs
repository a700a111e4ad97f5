//! Server lifecycle: bind, run the measurement loop on wall time, drain on
//! shutdown.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;

use crate::clock::ClockMode;
use crate::gateway::router;
use crate::lab::Lab;

/// Keeps the rig loop in step with wall time. Simulated labs only move on
/// explicit advances.
pub fn spawn_ticker(lab: Arc<Lab>) -> Option<tokio::task::JoinHandle<()>> {
    if lab.clock_mode() != ClockMode::Wall {
        return None;
    }
    let period = Duration::from_micros(lab.window_period_us().max(1) as u64);
    Some(tokio::spawn(async move {
        let mut iv = tokio::time::interval(period);
        iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            iv.tick().await;
            let lab = Arc::clone(&lab);
            if tokio::task::spawn_blocking(move || lab.sync()).await.is_err() {
                return;
            }
        }
    }))
}

pub async fn serve<F>(lab: Arc<Lab>, listener: TcpListener, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let ticker = spawn_ticker(Arc::clone(&lab));
    let result = axum::serve(listener, router(Arc::clone(&lab))).with_graceful_shutdown(shutdown).await;
    if let Some(t) = ticker {
        t.abort();
    }
    let flushed = tokio::task::spawn_blocking(move || lab.flush()).await.unwrap_or(false);
    if !flushed {
        tracing::warn!("event log could not be flushed on shutdown");
    }
    result
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
