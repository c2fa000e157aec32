//! Review backend for recorded sessions.
//!
//! [`ReviewService`] answers every query from the journals in a data
//! directory plus a per-session annotation journal beside each one; the
//! [`http`] module exposes it as JSON under `/api/v1`. Bodies are canonical
//! JSON, so unchanged data always yields byte-identical responses.
//!
//! There is no authentication: bind to loopback, or put an authenticating
//! proxy in front and route `/api/v1` through it.

pub mod http;
pub mod service;
pub mod views;

pub use service::{ReviewConfig, ReviewService, ServiceError};
pub use views::SCHEMA_VERSION;
