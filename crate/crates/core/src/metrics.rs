//! Engagement measures over a session and progress across sessions.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::journal::SessionJournal;
use crate::{ExpressionLabel, GameTrial, HeadPoseSample, LandmarkFrame, Micros, SpeechActivitySpan};

/// Yaw magnitude (degrees) under which the wearer counts as facing the partner.
pub const FACING_YAW_DEG: f64 = 15.0;
pub const YAW_BINS: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("session end must be positive")]
    ZeroSessionEnd,
    #[error("session {0} has no game trials")]
    NoTrials(String),
    #[error("journal has no session metadata")]
    MissingSessionMeta,
}

/// Half-open interval `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: Micros,
    pub end: Micros,
}

impl Span {
    pub fn new(start: Micros, end: Micros) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> Micros {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sorts spans and merges overlapping or touching ones; empty spans vanish.
pub fn normalize_spans(spans: impl IntoIterator<Item = Span>) -> Vec<Span> {
    let mut v: Vec<Span> = spans.into_iter().filter(|s| !s.is_empty()).collect();
    v.sort();
    let mut out: Vec<Span> = Vec::with_capacity(v.len());
    for s in v {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

pub fn total_length(spans: &[Span]) -> Micros {
    spans.iter().map(Span::len).sum()
}

/// Length of the intersection of two normalized span lists.
pub fn intersection_length(a: &[Span], b: &[Span]) -> Micros {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].start.max(b[j].start);
        let hi = a[i].end.min(b[j].end);
        total += hi.saturating_sub(lo);
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Spans during which a face was tracked.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaceVisibilityTimeline {
    spans: Vec<Span>,
}

impl FaceVisibilityTimeline {
    pub fn from_spans(spans: impl IntoIterator<Item = Span>) -> Self {
        Self {
            spans: normalize_spans(spans),
        }
    }

    /// Each frame covers the time until the next frame; the last frame covers
    /// nothing, so the timeline ends at the last frame timestamp.
    pub fn from_frames(frames: impl IntoIterator<Item = (Micros, bool)>) -> Self {
        let frames: Vec<(Micros, bool)> = frames.into_iter().collect();
        let spans = frames.windows(2).filter(|w| w[0].1).map(|w| Span::new(w[0].0, w[1].0));
        Self::from_spans(spans)
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn total(&self) -> Micros {
        total_length(&self.spans)
    }
}

pub fn face_in_view_fraction(timeline: &FaceVisibilityTimeline, session_end: Micros) -> Result<f64, MetricsError> {
    if session_end == 0 {
        return Err(MetricsError::ZeroSessionEnd);
    }
    let clipped = intersection_length(timeline.spans(), &[Span::new(0, session_end)]);
    Ok(clipped as f64 / session_end as f64)
}

/// Fraction of one speaker's speech time during which the face was in view.
/// `None` when the speaker never spoke.
pub fn gaze_while_speaking<'a>(
    timeline: &FaceVisibilityTimeline,
    speech: impl IntoIterator<Item = &'a SpeechActivitySpan>,
) -> Option<f64> {
    let speech = normalize_spans(speech.into_iter().map(|s| Span::new(s.start, s.end)));
    let total = total_length(&speech);
    (total > 0).then(|| intersection_length(timeline.spans(), &speech) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHabits {
    pub samples: u64,
    pub mean_abs_yaw: f64,
    /// Counts over `[-90,-70), [-70,-50), …, [70,90]`.
    pub yaw_histogram: [u64; YAW_BINS],
    pub facing_fraction: f64,
    pub empty: bool,
}

pub fn yaw_bin(yaw: f64) -> usize {
    let idx = ((yaw + 90.0) / 20.0).floor();
    idx.clamp(0.0, (YAW_BINS - 1) as f64) as usize
}

pub fn pose_habits(stream: &[HeadPoseSample]) -> PoseHabits {
    let mut hist = [0u64; YAW_BINS];
    let mut abs_sum = 0.0;
    let mut facing = 0u64;
    for s in stream {
        hist[yaw_bin(s.yaw)] += 1;
        abs_sum += s.yaw.abs();
        if s.yaw.abs() <= FACING_YAW_DEG {
            facing += 1;
        }
    }
    let n = stream.len() as u64;
    PoseHabits {
        samples: n,
        mean_abs_yaw: if n > 0 { abs_sum / n as f64 } else { 0.0 },
        yaw_histogram: hist,
        facing_fraction: if n > 0 { facing as f64 / n as f64 } else { 0.0 },
        empty: n == 0,
    }
}

/// Ordinary least-squares slope of `values` against their index; `None` below two points.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameAccuracyTrend {
    pub sessions: Vec<String>,
    pub accuracies: Vec<f64>,
    pub slope: Option<f64>,
}

/// Per-session game accuracy and its per-session OLS trend.
pub fn game_accuracy_trend(sessions: &[(String, Vec<GameTrial>)]) -> Result<GameAccuracyTrend, MetricsError> {
    let mut accuracies = Vec::with_capacity(sessions.len());
    for (id, trials) in sessions {
        if trials.is_empty() {
            return Err(MetricsError::NoTrials(id.clone()));
        }
        let correct = trials.iter().filter(|t| t.correct).count();
        accuracies.push(correct as f64 / trials.len() as f64);
    }
    let points: Vec<_> = accuracies.iter().enumerate().map(|(i, a)| (i as f64, *a)).collect();
    Ok(GameAccuracyTrend {
        sessions: sessions.iter().map(|(id, _)| id.clone()).collect(),
        slope: ols_slope(&points),
        accuracies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CueCount {
    pub issued: u64,
    pub suppressed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementMetrics {
    pub session_id: String,
    pub session_end_us: Micros,
    pub face_in_view_fraction: f64,
    /// Per speaker; `None` when the speaker has no speech time or no face
    /// was ever tracked.
    pub gaze_while_speaking: BTreeMap<String, Option<f64>>,
    /// Stricter variant: face in view and |yaw| within the facing cone.
    pub gaze_while_speaking_facing: BTreeMap<String, Option<f64>>,
    pub pose_habits: PoseHabits,
    pub cue_counts: BTreeMap<ExpressionLabel, CueCount>,
    pub event_counts: BTreeMap<ExpressionLabel, u64>,
    pub game_trials: u64,
    pub game_accuracy: Option<f64>,
}

fn frame_flags(frames: &[&LandmarkFrame]) -> Vec<(Micros, bool)> {
    frames.iter().map(|f| (f.timestamp, f.face_present)).collect()
}

/// Every metric above, derived from a journal alone.
pub fn session_summary(journal: &SessionJournal) -> Result<EngagementMetrics, MetricsError> {
    let meta = journal.meta();
    let frames: Vec<&LandmarkFrame> = journal.frames().collect();
    let flags: Vec<(Micros, bool)> = if frames.is_empty() {
        journal.frame_metas().map(|m| (m.timestamp, m.face_present)).collect()
    } else {
        frame_flags(&frames)
    };
    let session_end = journal.session_end();
    let timeline = FaceVisibilityTimeline::from_frames(flags.iter().copied());
    let face_in_view = face_in_view_fraction(&timeline, session_end).unwrap_or(0.0);

    let poses: Vec<HeadPoseSample> = journal.poses().copied().collect();
    let pose_at: BTreeMap<Micros, f64> = poses.iter().map(|p| (p.timestamp, p.yaw)).collect();
    let facing_timeline = FaceVisibilityTimeline::from_frames(
        flags
            .iter()
            .map(|&(t, present)| (t, present && pose_at.get(&t).is_some_and(|y| y.abs() <= FACING_YAW_DEG))),
    );

    let mut by_speaker: BTreeMap<String, Vec<&SpeechActivitySpan>> = BTreeMap::new();
    for s in journal.speech_spans() {
        by_speaker.entry(s.speaker_id.clone()).or_default().push(s);
    }
    // without a single tracked face there is no gaze to measure
    let any_face = flags.iter().any(|f| f.1);
    let gaze_over = |t: &FaceVisibilityTimeline| -> BTreeMap<String, Option<f64>> {
        by_speaker
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    gaze_while_speaking(t, v.iter().copied()).filter(|_| any_face),
                )
            })
            .collect()
    };
    let gaze = gaze_over(&timeline);
    let gaze_facing = gaze_over(&facing_timeline);

    let mut cue_counts: BTreeMap<ExpressionLabel, CueCount> =
        ExpressionLabel::ALL.iter().map(|l| (*l, CueCount::default())).collect();
    for c in journal.cues() {
        let entry = cue_counts.entry(c.label).or_default();
        if c.suppressed {
            entry.suppressed += 1;
        } else {
            entry.issued += 1;
        }
    }
    let mut event_counts: BTreeMap<ExpressionLabel, u64> = ExpressionLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for e in journal.events() {
        *event_counts.entry(e.label).or_default() += 1;
    }
    let trials: Vec<&GameTrial> = journal.game_trials().collect();
    let game_accuracy =
        (!trials.is_empty()).then(|| trials.iter().filter(|t| t.correct).count() as f64 / trials.len() as f64);

    Ok(EngagementMetrics {
        session_id: meta.id.clone(),
        session_end_us: session_end,
        face_in_view_fraction: face_in_view,
        gaze_while_speaking: gaze,
        gaze_while_speaking_facing: gaze_facing,
        pose_habits: pose_habits(&poses),
        cue_counts,
        event_counts,
        game_trials: trials.len() as u64,
        game_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub session_id: String,
    pub started_at: DateTime<Utc>,
    pub metrics: BTreeMap<String, f64>,
    pub game_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSeries {
    pub subject: String,
    pub points: Vec<ProgressPoint>,
    /// OLS slope per metric against session index; a metric with fewer than
    /// two defined sessions has no entry.
    pub slopes: BTreeMap<String, f64>,
}

/// Metric values tracked across sessions.
fn tracked_metrics(m: &EngagementMetrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("face_in_view_fraction".to_string(), m.face_in_view_fraction);
    if !m.pose_habits.empty {
        out.insert("mean_abs_yaw".to_string(), m.pose_habits.mean_abs_yaw);
        out.insert("facing_fraction".to_string(), m.pose_habits.facing_fraction);
    }
    let issued: u64 = m.cue_counts.values().map(|c| c.issued).sum();
    let events: u64 = m.event_counts.values().sum();
    out.insert("issued_cues".to_string(), issued as f64);
    out.insert("events".to_string(), events as f64);
    out
}

/// Builds the progress series; sessions are ordered by start time (then id).
/// Slopes use each session's index in that order, skipping sessions where a
/// metric is undefined.
pub fn progress_series(subject: &str, sessions: &[(crate::SessionMeta, EngagementMetrics)]) -> ProgressSeries {
    let mut ordered: Vec<&(crate::SessionMeta, EngagementMetrics)> = sessions.iter().collect();
    ordered.sort_by(|a, b| (a.0.started_at, &a.0.id).cmp(&(b.0.started_at, &b.0.id)));
    let points: Vec<ProgressPoint> = ordered
        .iter()
        .map(|(meta, m)| ProgressPoint {
            session_id: meta.id.clone(),
            started_at: meta.started_at,
            metrics: tracked_metrics(m),
            game_accuracy: m.game_accuracy,
        })
        .collect();
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        for (k, v) in &p.metrics {
            series.entry(k.clone()).or_default().push((i as f64, *v));
        }
        let acc = series.entry("game_accuracy".to_string()).or_default();
        if let Some(a) = p.game_accuracy {
            acc.push((i as f64, a));
        }
    }
    let slopes = series
        .into_iter()
        .filter_map(|(k, pts)| Some((k, ols_slope(&pts)?)))
        .collect();
    ProgressSeries {
        subject: subject.to_string(),
        points,
        slopes,
    }
}
