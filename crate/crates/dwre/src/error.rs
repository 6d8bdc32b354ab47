use thiserror::Error;

/// Errors surfaced by the walk, environment and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("map family rejected: {0}")]
    Map(String),

    #[error("image arc wraps the circle (length {len:.6} >= 1)")]
    ArcWrapped { len: f64 },

    #[error("site {site} outside environment window [{lo}, {hi}]")]
    Window { site: i64, lo: i64, hi: i64 },

    #[error("horizon {horizon} exceeded before hitting site {target} (x0={x0}); gate conditions likely violated")]
    HorizonExceeded { target: i64, horizon: u64, x0: f64 },

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("environment not verified; rerun with verification or force")]
    NotVerified,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
