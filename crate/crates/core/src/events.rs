//! Temporal logic over class scores: exponential smoothing, hysteresis
//! segmentation into expressive events, and the cue policy.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::{ClassScores, Cue, CueChannel, ExpressionLabel, ExpressiveEvent, Micros, SuppressReason, MICROS_PER_SEC};

const K: usize = ExpressionLabel::COUNT;

/// Width of the trailing window used by the global rate limit.
pub const RATE_WINDOW: Micros = 60 * MICROS_PER_SEC;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EventsError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("events are not sorted by start (index {0})")]
    Unsorted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub alpha: f64,
}

impl SmoothingConfig {
    pub fn new(alpha: f64) -> Result<Self, EventsError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(EventsError::InvalidConfig(format!("alpha {alpha} not in (0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// Per-label exponential moving average, `s_t = α·p_t + (1 − α)·s_{t−1}`.
#[derive(Debug, Clone)]
pub struct Smoother {
    alpha: f64,
    state: Option<[f64; K]>,
}

impl Smoother {
    pub fn new(config: SmoothingConfig) -> Self {
        Self {
            alpha: config.alpha,
            state: None,
        }
    }

    pub fn push(&mut self, input: &ClassScores) -> ClassScores {
        let next = match self.state {
            None => input.scores,
            Some(prev) => std::array::from_fn(|k| self.alpha * input.scores[k] + (1.0 - self.alpha) * prev[k]),
        };
        self.state = Some(next);
        ClassScores {
            timestamp: input.timestamp,
            scores: next,
        }
    }

    /// Forgets history; the next input starts a fresh average.
    pub fn reset(&mut self) {
        self.state = None;
    }
}

pub fn smooth(stream: &[ClassScores], config: SmoothingConfig) -> Vec<ClassScores> {
    let mut s = Smoother::new(config);
    stream.iter().map(|x| s.push(x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterConfig {
    pub enter_threshold: f64,
    pub exit_threshold: f64,
    pub min_duration: Micros,
}

impl SegmenterConfig {
    pub fn new(enter_threshold: f64, exit_threshold: f64, min_duration: Micros) -> Result<Self, EventsError> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(enter_threshold) || !unit(exit_threshold) {
            return Err(EventsError::InvalidConfig("thresholds must lie in (0, 1)".into()));
        }
        if exit_threshold >= enter_threshold {
            return Err(EventsError::InvalidConfig(format!(
                "exit threshold {exit_threshold} must be below enter threshold {enter_threshold}"
            )));
        }
        if min_duration == 0 {
            return Err(EventsError::InvalidConfig("min_duration must be positive".into()));
        }
        Ok(Self {
            enter_threshold,
            exit_threshold,
            min_duration,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Track {
    Idle,
    Active {
        start: Micros,
        last: Micros,
        peak: f64,
        confirmed_at: Option<Micros>,
    },
}

/// An episode that just reached the minimum duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confirmation {
    pub label: ExpressionLabel,
    pub start: Micros,
    pub confirmed_at: Micros,
}

impl Confirmation {
    pub fn pending_event(&self) -> ExpressiveEvent {
        ExpressiveEvent {
            label: self.label,
            start: self.start,
            end: self.confirmed_at,
            confirmed_at: self.confirmed_at,
            peak_score: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentStep {
    /// Sorted by start.
    pub confirmed: Vec<Confirmation>,
    /// Events that ended before this frame, sorted by start then label code.
    pub finished: Vec<ExpressiveEvent>,
}

/// Streaming hysteresis segmenter: one idle → candidate → event automaton per
/// non-neutral label.
///
/// A label becomes a candidate on a frame where its smoothed score reaches the
/// enter threshold and it is the frame's argmax. The candidate is confirmed
/// once it has lasted `min_duration`, and a candidate or event ends on the
/// first frame whose score falls to the exit threshold; the event's end is the
/// frame before. Unconfirmed candidates are dropped.
#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegmenterConfig,
    tracks: [Track; K],
}

impl Segmenter {
    pub fn new(config: SegmenterConfig) -> Self {
        Self {
            config,
            tracks: [Track::Idle; K],
        }
    }

    /// Feeds one frame; timestamps must strictly increase.
    pub fn push(&mut self, frame: &ClassScores) -> SegmentStep {
        let mut step = SegmentStep::default();
        let t = frame.timestamp;
        let top = frame.argmax();
        for label in ExpressionLabel::EXPRESSIVE {
            let score = frame.score(label);
            let track = &mut self.tracks[label.index()];
            match *track {
                Track::Active {
                    start,
                    last,
                    peak,
                    confirmed_at,
                } => {
                    if score <= self.config.exit_threshold {
                        if let Some(confirmed_at) = confirmed_at {
                            step.finished.push(ExpressiveEvent {
                                label,
                                start,
                                end: last,
                                confirmed_at,
                                peak_score: peak,
                            });
                        }
                        *track = Track::Idle;
                    } else {
                        let confirmed_at = match confirmed_at {
                            None if t - start >= self.config.min_duration => {
                                step.confirmed.push(Confirmation {
                                    label,
                                    start,
                                    confirmed_at: t,
                                });
                                Some(t)
                            }
                            c => c,
                        };
                        *track = Track::Active {
                            start,
                            last: t,
                            peak: peak.max(score),
                            confirmed_at,
                        };
                    }
                }
                Track::Idle => {
                    if score >= self.config.enter_threshold && top == label {
                        *track = Track::Active {
                            start: t,
                            last: t,
                            peak: score,
                            confirmed_at: None,
                        };
                    }
                }
            }
        }
        step.confirmed.sort_by_key(|c| (c.start, c.label));
        step.finished.sort_by_key(|e| (e.start, e.label));
        step
    }

    /// Ends the stream: open confirmed events close at their last frame.
    pub fn finish(&mut self) -> Vec<ExpressiveEvent> {
        let mut out = Vec::new();
        for (k, track) in self.tracks.iter_mut().enumerate() {
            if let Track::Active {
                start,
                last,
                peak,
                confirmed_at: Some(confirmed_at),
            } = *track
            {
                out.push(ExpressiveEvent {
                    label: ExpressionLabel::ALL[k],
                    start,
                    end: last,
                    confirmed_at,
                    peak_score: peak,
                });
            }
            *track = Track::Idle;
        }
        out.sort_by_key(|e| (e.start, e.label));
        out
    }
}

/// Batch segmentation of a smoothed stream; sorted by start, ties by label code.
pub fn segment_events(smoothed: &[ClassScores], config: SegmenterConfig) -> Vec<ExpressiveEvent> {
    let mut seg = Segmenter::new(config);
    let mut events = Vec::new();
    for frame in smoothed {
        events.extend(seg.push(frame).finished);
    }
    events.extend(seg.finish());
    events.sort_by_key(|e| (e.start, e.label));
    events
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CuePolicyConfig {
    pub per_label_cooldown: Micros,
    /// Maximum issued cues in any trailing 60 s.
    pub global_rate_limit: u32,
    pub channel: CueChannel,
    pub enabled_labels: BTreeSet<ExpressionLabel>,
}

impl Default for CuePolicyConfig {
    fn default() -> Self {
        Self {
            per_label_cooldown: 5 * MICROS_PER_SEC,
            global_rate_limit: 12,
            channel: CueChannel::Visual,
            enabled_labels: ExpressionLabel::EXPRESSIVE.into_iter().collect(),
        }
    }
}

/// Stateful cue decisions for events arriving in start order.
///
/// Suppression checks run in a fixed order: neutral, policy off, per-label
/// cooldown, then the global rate limit over the trailing 60 s of issued cues.
#[derive(Debug, Clone)]
pub struct CuePolicy {
    config: CuePolicyConfig,
    last_issued: [Option<Micros>; K],
    window: VecDeque<Micros>,
}

impl CuePolicy {
    pub fn new(config: CuePolicyConfig) -> Self {
        Self {
            config,
            last_issued: [None; K],
            window: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &CuePolicyConfig {
        &self.config
    }

    pub fn decide(&mut self, label: ExpressionLabel, at: Micros) -> Cue {
        let channel = self.config.channel;
        let reason = if label.is_neutral() {
            Some(SuppressReason::Neutral)
        } else if !self.config.enabled_labels.contains(&label) {
            Some(SuppressReason::PolicyOff)
        } else if self.last_issued[label.index()].is_some_and(|last| at - last < self.config.per_label_cooldown) {
            Some(SuppressReason::Cooldown)
        } else {
            while self.window.front().is_some_and(|&t| at - t >= RATE_WINDOW) {
                self.window.pop_front();
            }
            (self.window.len() >= self.config.global_rate_limit as usize).then_some(SuppressReason::RateLimit)
        };
        match reason {
            Some(reason) => Cue::suppressed(label, at, channel, reason),
            None => {
                self.last_issued[label.index()] = Some(at);
                self.window.push_back(at);
                Cue::issued(label, at, channel)
            }
        }
    }
}

/// One cue per event (issued at the event's confirmation time), in input order.
pub fn decide_cues(events: &[ExpressiveEvent], policy: &CuePolicyConfig) -> Result<Vec<Cue>, EventsError> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].start < w[0].start || w[1].confirmed_at < w[0].confirmed_at {
            return Err(EventsError::Unsorted(i + 1));
        }
    }
    let mut p = CuePolicy::new(policy.clone());
    Ok(events.iter().map(|e| p.decide(e.label, e.confirmed_at)).collect())
}

/// `events` section of the configuration file; durations in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventsConfig {
    pub alpha: f64,
    pub enter_threshold: f64,
    pub exit_threshold: f64,
    pub min_duration_ms: u64,
    pub per_label_cooldown_ms: u64,
    pub global_rate_limit: u32,
    pub channel: CueChannel,
    pub enabled_labels: BTreeSet<ExpressionLabel>,
}

impl Default for EventsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            enter_threshold: 0.65,
            exit_threshold: 0.45,
            min_duration_ms: 500,
            per_label_cooldown_ms: 5_000,
            global_rate_limit: 12,
            channel: CueChannel::Visual,
            enabled_labels: ExpressionLabel::EXPRESSIVE.into_iter().collect(),
        }
    }
}

impl EventsConfig {
    pub fn smoothing(&self) -> Result<SmoothingConfig, EventsError> {
        SmoothingConfig::new(self.alpha)
    }

    pub fn segmenter(&self) -> Result<SegmenterConfig, EventsError> {
        SegmenterConfig::new(self.enter_threshold, self.exit_threshold, self.min_duration_ms * 1_000)
    }

    pub fn cue_policy(&self) -> Result<CuePolicyConfig, EventsError> {
        if self.enabled_labels.contains(&ExpressionLabel::Neutral) {
            return Err(EventsError::InvalidConfig(
                "neutral cannot be an enabled cue label".into(),
            ));
        }
        Ok(CuePolicyConfig {
            per_label_cooldown: self.per_label_cooldown_ms * 1_000,
            global_rate_limit: self.global_rate_limit,
            channel: self.channel,
            enabled_labels: self.enabled_labels.clone(),
        })
    }

    pub fn validate(&self) -> Result<(), EventsError> {
        self.smoothing()?;
        self.segmenter()?;
        self.cue_policy()?;
        Ok(())
    }
}
