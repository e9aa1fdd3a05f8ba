//! HTTP service and command line over concept-space snapshots.
//!
//! The service serves one immutable snapshot at a time. Pipeline runs
//! submitted over HTTP are queued and executed one at a time; when a run
//! finishes its snapshot replaces the served one in a single swap.

pub mod api;
pub mod cli;
pub mod payload;
pub mod state;

use std::sync::Arc;

use anyhow::Context;
use tokio::net::TcpListener;

pub use api::router;
pub use state::{AppState, Served};

/// Binds `addr`. Fails when the port is taken.
pub async fn bind(addr: &str) -> anyhow::Result<TcpListener> {
    TcpListener::bind(addr).await.with_context(|| format!("cannot listen on {addr}"))
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> anyhow::Result<()> {
    axum::serve(listener, router(state)).await?;
    Ok(())
}
