//! HTTP service for collecting triple comparisons from workers in 12-question
//! batches, training embeddings on the accepted answers and exporting them.

pub mod config;
pub mod error;
pub mod routes;
pub mod state;

pub use config::ServiceConfig;
pub use error::{ApiError, ErrorBody, ServiceError};
pub use routes::router;
pub use state::AppState;

/// Binds `config.listen` and serves until the process stops.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let listen = config.listen.clone();
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
