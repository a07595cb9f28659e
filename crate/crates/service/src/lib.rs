//! Review service: slide submission with asynchronous diagnosis, a result
//! cache keyed by content and model version, heatmaps, feedback capture and
//! CSV export over HTTP.

pub mod api;
pub mod error;
pub mod heatmap;
pub mod service;
pub mod store;

use std::sync::Arc;

use colomil_core::scorer::load_model;
use tracing::info;

pub use api::{router, AppState};
pub use error::{ErrorBody, ServiceError};
pub use service::{ExportRow, JobStatus, Service, ServiceConfig, EXPORT_HEADER};

/// Opens the service, reschedules unfinished jobs and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let model = load_model(&cfg.checkpoint)?;
    let side = model.config().input_size;
    let listen = cfg.listen.clone();
    let (svc, pending) = Service::open(cfg, Arc::new(model), side)?;
    let state = AppState::new(svc.clone());
    for id in pending {
        state.schedule(id);
    }
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    info!(addr = %listener.local_addr()?, model = svc.model_version(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

pub fn serve_blocking(cfg: ServiceConfig) -> Result<(), ServiceError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(cfg))
}
