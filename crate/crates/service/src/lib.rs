//! HTTP search service over a premise index that accepts new premises at
//! runtime.
//!
//! Reads never block on writes: each request works on an immutable
//! [`Snapshot`], and inserts publish a fresh one after the premise has been
//! embedded and appended to the on-disk log. The log is replayed on startup.

mod api;
mod config;
mod state;

use std::sync::Arc;

pub use api::{router, AppState, SearchRequest, SearchResponse, SearchResult, StateInput, Stats};
pub use config::{
    ConfigError, ServiceConfig, ENV_APPEND_LOG, ENV_CORPUS, ENV_CORS_ORIGIN, ENV_INDEX, ENV_LISTEN, ENV_RERANKER, ENV_RETRIEVER,
};
pub use state::{AppendLog, Engine, InsertError, Models, NewPremise, ServiceError, Snapshot};

impl AppState {
    /// Loads every artifact. A missing index file leaves the service up but
    /// answering 503; any other load failure is an error.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        let engine = if config.index.exists() {
            Some(Arc::new(Engine::load(&config)?))
        } else {
            tracing::warn!(index = %config.index.display(), "index not found; serving 503 until restarted with an index");
            None
        };
        Ok(AppState {
            config: Arc::new(config),
            engine,
        })
    }
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(state.config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
