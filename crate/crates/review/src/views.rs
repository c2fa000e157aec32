//! JSON projections served by the API. Every view carries `schema_version`.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use cuelens_core::metrics::{EngagementMetrics, ProgressSeries, Span};
use cuelens_core::{
    Annotation, Cue, ExpressionLabel, ExpressiveEvent, FrameMeta, HighlightClip, LandmarkFrame, Micros,
};
use serde::{Deserialize, Serialize};

/// Bumped on any breaking change to a view.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummaryView {
    pub schema_version: u32,
    pub session_id: String,
    pub subject: String,
    pub started_at: DateTime<Utc>,
    pub frame_rate_hz: f64,
    pub session_end_us: Micros,
    pub frame_count: u64,
    pub event_count: u64,
    pub issued_cue_count: u64,
    pub suppressed_cue_count: u64,
    pub clip_count: u64,
    pub annotation_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileWarning {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionListView {
    pub schema_version: u32,
    /// Newest first.
    pub sessions: Vec<SessionSummaryView>,
    pub warnings: Vec<FileWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipView {
    pub index: usize,
    pub start: Micros,
    pub end: Micros,
    /// Indices into the timeline's `events`.
    pub event_refs: Vec<usize>,
    pub dominant_label: ExpressionLabel,
}

impl ClipView {
    pub fn new(index: usize, clip: HighlightClip) -> Self {
        Self {
            index,
            start: clip.start,
            end: clip.end,
            event_refs: clip.event_refs,
            dominant_label: clip.dominant_label,
        }
    }
}

/// Smoothed scores sampled at a uniform stride over the recorded frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTracks {
    pub stride: usize,
    pub timestamps: Vec<Micros>,
    /// One series per label, aligned with `timestamps`.
    pub scores: BTreeMap<ExpressionLabel, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineView {
    pub schema_version: u32,
    pub session_id: String,
    pub subject: String,
    pub started_at: DateTime<Utc>,
    pub session_end_us: Micros,
    pub highlight_pad_us: Micros,
    /// Sorted by start, then label code.
    pub events: Vec<ExpressiveEvent>,
    pub cues: Vec<Cue>,
    pub clips: Vec<ClipView>,
    pub face_visibility: Vec<Span>,
    pub score_tracks: ScoreTracks,
    /// Sorted by timestamp, then id.
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightFramesView {
    pub schema_version: u32,
    pub session_id: String,
    pub clip: ClipView,
    pub frames: Vec<FrameMeta>,
    /// Distinct blob hashes referenced by `frames`, sorted.
    pub blobs: Vec<String>,
    /// Landmark frames inside the clip, for replay.
    pub landmarks: Vec<LandmarkFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub schema_version: u32,
    pub session_id: String,
    pub metrics: EngagementMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressView {
    pub schema_version: u32,
    pub subject: String,
    /// Sessions in series order.
    pub session_ids: Vec<String>,
    pub series: ProgressSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub schema_version: u32,
    pub session_id: String,
    pub annotation: Annotation,
}

/// POST body for a new annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewAnnotation {
    #[serde(default = "default_author")]
    pub author: String,
    pub timestamp_in_session: Micros,
    pub text: String,
}

fn default_author() -> String {
    "caregiver".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorView {
    pub schema_version: u32,
    pub error: ErrorBody,
}
