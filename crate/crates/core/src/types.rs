//! Domain records shared across the pipeline, the journal and the review service.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{ExpressionLabel, Micros, LANDMARK_COUNT};

/// Axis-aligned rectangle in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl FaceBox {
    /// Tight bounding box of a point set, `None` when empty.
    pub fn bounding(points: &[[f64; 2]]) -> Option<Self> {
        let first = points.first()?;
        let (mut min, mut max) = (*first, *first);
        for p in points {
            min[0] = min[0].min(p[0]);
            min[1] = min[1].min(p[1]);
            max[0] = max[0].max(p[0]);
            max[1] = max[1].max(p[1]);
        }
        Some(Self {
            x: min[0],
            y: min[1],
            width: max[0] - min[0],
            height: max[1] - min[1],
        })
    }
}

/// One timestamped landmark observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFrame {
    pub timestamp: Micros,
    pub face_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<FaceBox>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrameError {
    #[error("frame at {0} us: face present but {1} points (expected 68)")]
    PointCount(Micros, usize),
    #[error("frame at {0} us: points supplied without a face")]
    PointsWithoutFace(Micros),
    #[error("frame at {0} us: non-finite coordinate")]
    NonFinite(Micros),
}

impl LandmarkFrame {
    pub fn absent(timestamp: Micros) -> Self {
        Self {
            timestamp,
            face_present: false,
            points: None,
            face_box: None,
        }
    }

    /// A face-present frame; the face box is derived from the points.
    pub fn present(timestamp: Micros, points: Vec<[f64; 2]>) -> Self {
        let face_box = FaceBox::bounding(&points);
        Self {
            timestamp,
            face_present: true,
            points: Some(points),
            face_box,
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        match (&self.points, self.face_present) {
            (Some(points), true) => {
                if points.len() != LANDMARK_COUNT {
                    return Err(FrameError::PointCount(self.timestamp, points.len()));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(FrameError::NonFinite(self.timestamp));
                }
                Ok(())
            }
            (None, true) => Err(FrameError::PointCount(self.timestamp, 0)),
            (Some(_), false) => Err(FrameError::PointsWithoutFace(self.timestamp)),
            (None, false) => Ok(()),
        }
    }
}

/// Probability distribution over the eight labels for one frame, indexed by wire code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub timestamp: Micros,
    pub scores: [f64; ExpressionLabel::COUNT],
}

impl ClassScores {
    pub fn score(&self, label: ExpressionLabel) -> f64 {
        self.scores[label.index()]
    }

    /// Label with the highest score; ties go to the lower wire code.
    pub fn argmax(&self) -> ExpressionLabel {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate().skip(1) {
            if *s > self.scores[best] {
                best = i;
            }
        }
        ExpressionLabel::ALL[best]
    }
}

/// A segmented expression episode.
///
/// `confirmed_at` is the frame at which the episode had lasted the minimum
/// duration; any cue for the event is issued then.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressiveEvent {
    pub label: ExpressionLabel,
    pub start: Micros,
    pub end: Micros,
    pub confirmed_at: Micros,
    pub peak_score: f64,
}

impl ExpressiveEvent {
    pub fn duration(&self) -> Micros {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueChannel {
    Visual,
    Audio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressReason {
    Cooldown,
    RateLimit,
    Neutral,
    PolicyOff,
}

/// A social cue decision. Suppressed cues are kept so the log is complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cue {
    pub label: ExpressionLabel,
    pub issued_at: Micros,
    pub channel: CueChannel,
    pub suppressed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppress_reason: Option<SuppressReason>,
}

impl Cue {
    pub fn issued(label: ExpressionLabel, issued_at: Micros, channel: CueChannel) -> Self {
        Self {
            label,
            issued_at,
            channel,
            suppressed: false,
            suppress_reason: None,
        }
    }

    pub fn suppressed(label: ExpressionLabel, issued_at: Micros, channel: CueChannel, reason: SuppressReason) -> Self {
        Self {
            label,
            issued_at,
            channel,
            suppressed: true,
            suppress_reason: Some(reason),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.suppressed == self.suppress_reason.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechActivitySpan {
    pub speaker_id: String,
    pub start: Micros,
    pub end: Micros,
}

/// Head orientation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPoseSample {
    pub timestamp: Micros,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameTrial {
    pub session_id: String,
    pub trial_index: u32,
    pub prompted_label: ExpressionLabel,
    pub responded_label: ExpressionLabel,
    pub correct: bool,
}

impl GameTrial {
    pub fn new(
        session_id: impl Into<String>,
        trial_index: u32,
        prompted_label: ExpressionLabel,
        responded_label: ExpressionLabel,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            trial_index,
            prompted_label,
            responded_label,
            correct: prompted_label == responded_label,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.correct == (self.prompted_label == self.responded_label)
    }
}

/// A caregiver note attached to a moment of a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: u64,
    pub session_id: String,
    pub author: String,
    pub timestamp_in_session: Micros,
    pub text: String,
    pub created_at: DateTime<Utc>,
}

/// A padded, merged review interval around one or more events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightClip {
    pub start: Micros,
    pub end: Micros,
    pub event_refs: Vec<usize>,
    pub dominant_label: ExpressionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub id: String,
    pub subject: String,
    pub started_at: DateTime<Utc>,
    pub frame_rate_hz: f64,
}

/// Per-frame metadata, optionally pointing at an image blob by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMeta {
    pub timestamp: Micros,
    pub face_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}
