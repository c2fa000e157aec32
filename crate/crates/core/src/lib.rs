//! Landmark-driven facial expression pipeline.
//!
//! The crate covers everything between a stream of 68-point face landmarks and
//! the artifacts a caregiver reviews afterwards:
//!
//! - [`vision`]: landmark normalization, geometric features, neutral calibration
//!   and weak-perspective head pose.
//! - [`affect`]: multinomial logistic regression over those features.
//! - [`events`]: score smoothing, hysteresis segmentation into expressive events,
//!   and the cue policy that rate-limits what the wearer sees.
//! - [`journal`]: the append-only `AGSJ` session file format.
//! - [`highlights`]: padding and merging events into reviewable clips.
//! - [`metrics`]: engagement measures and cross-session progress.
//! - [`synth`]: seeded synthetic sessions with ground truth.
//! - [`pipeline`]: the per-frame streaming composition of the above.

pub mod affect;
pub mod canonical;
pub mod events;
pub mod highlights;
pub mod journal;
pub mod label;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod types;
pub mod vision;

pub use label::ExpressionLabel;
pub use types::*;

/// Microseconds since session start.
pub type Micros = u64;

/// Number of landmarks in a frame (iBUG 68-point layout).
pub const LANDMARK_COUNT: usize = 68;

pub(crate) const MICROS_PER_SEC: u64 = 1_000_000;
