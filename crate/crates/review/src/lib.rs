//! HTTP backend for blind preference surveys over model annotations and for
//! human verification of template matches.
//!
//! Evaluators only ever receive blinded items: candidate texts under opaque
//! ids. Which model and prompt condition produced each candidate stays on
//! the server and is only visible through the admin tally.

pub mod api;
pub mod store;
pub mod survey;

use std::net::SocketAddr;

pub use api::{router, AppState};
pub use store::{NextItem, Store, StoreError};
pub use survey::{
    create_survey, tally, BlindedCandidate, BlindedItem, SelectionMode, SourceDescriptor, Subtask, Survey, SurveyError,
    SurveyItem, Tally, VoteRecord, NONE_CANDIDATE,
};

/// Version stamped on every request and response body.
pub const SCHEMA_VERSION: u32 = 1;

/// Serves `state` on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
