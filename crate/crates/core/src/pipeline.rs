//! Per-frame streaming composition: landmarks → features → scores →
//! smoothing → events → cues, plus head pose.
//!
//! A frame without a usable face (absent, or with coincident eyes) closes any
//! open events and restarts smoothing, so episodes never bridge a face gap.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::affect::{predict, AffectError, ClassifierModel};
use crate::events::{CuePolicy, EventsConfig, EventsError, Segmenter, Smoother};
use crate::journal::{JournalError, JournalWriter, Record, SessionJournal};
use crate::vision::{
    calibrate_neutral, estimate_head_pose, extract_features, normalize_landmarks, CanonicalLandmarks,
    ReferenceFaceModel, MIN_CALIBRATION_FRAMES,
};
use crate::{
    ClassScores, Cue, ExpressiveEvent, FrameError, GameTrial, LandmarkFrame, Micros, SessionMeta, SpeechActivitySpan,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("frame timestamp {got} us does not follow {prev} us")]
    NonMonotonic { prev: Micros, got: Micros },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Affect(#[from] AffectError),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error("calibration needs at least {MIN_CALIBRATION_FRAMES} frames, configured {0}")]
    Calibration(usize),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub events: EventsConfig,
    /// Leading face frames used as the neutral baseline; 0 disables calibration.
    pub calibration_frames: usize,
}

/// Everything the pipeline decided on one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameOutput {
    pub timestamp: Micros,
    /// Smoothed scores; `None` without a usable face.
    pub scores: Option<ClassScores>,
    pub pose: Option<crate::HeadPoseSample>,
    /// Events finalized by this frame, sorted by start then label code.
    pub events: Vec<ExpressiveEvent>,
    /// One decision per event confirmed on this frame.
    pub cues: Vec<Cue>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    model: ClassifierModel,
    face_model: ReferenceFaceModel,
    smoother: Smoother,
    segmenter: Segmenter,
    policy: CuePolicy,
    calibration_target: usize,
    calibration: Vec<LandmarkFrame>,
    baseline: Option<CanonicalLandmarks>,
    last_timestamp: Option<Micros>,
}

impl Pipeline {
    pub fn new(
        model: ClassifierModel,
        face_model: ReferenceFaceModel,
        config: &PipelineConfig,
    ) -> Result<Self, PipelineError> {
        let c = config.calibration_frames;
        if c != 0 && c < MIN_CALIBRATION_FRAMES {
            return Err(PipelineError::Calibration(c));
        }
        Ok(Self {
            model,
            face_model,
            smoother: Smoother::new(config.events.smoothing()?),
            segmenter: Segmenter::new(config.events.segmenter()?),
            policy: CuePolicy::new(config.events.cue_policy()?),
            calibration_target: c,
            calibration: Vec::new(),
            baseline: None,
            last_timestamp: None,
        })
    }

    pub fn baseline(&self) -> Option<&CanonicalLandmarks> {
        self.baseline.as_ref()
    }

    /// Timestamps must strictly increase.
    pub fn process(&mut self, frame: &LandmarkFrame) -> Result<FrameOutput, PipelineError> {
        if let Some(prev) = self.last_timestamp {
            if frame.timestamp <= prev {
                return Err(PipelineError::NonMonotonic {
                    prev,
                    got: frame.timestamp,
                });
            }
        }
        frame.validate()?;
        self.last_timestamp = Some(frame.timestamp);
        let mut out = FrameOutput {
            timestamp: frame.timestamp,
            ..FrameOutput::default()
        };
        let canon = match frame.face_present.then(|| normalize_landmarks(frame)) {
            Some(Ok(c)) => c,
            _ => {
                out.events = self.segmenter.finish();
                self.smoother.reset();
                return Ok(out);
            }
        };
        if self.baseline.is_none() && self.calibration.len() < self.calibration_target {
            self.calibration.push(frame.clone());
            if self.calibration.len() == self.calibration_target {
                self.baseline = calibrate_neutral(&self.calibration).ok();
                self.calibration = Vec::new();
            }
        }
        out.pose = estimate_head_pose(frame, &self.face_model).ok();
        let features = extract_features(&canon, self.baseline.as_ref());
        let smoothed = self.smoother.push(&predict(&self.model, &features, frame.timestamp)?);
        let step = self.segmenter.push(&smoothed);
        out.events = step.finished;
        out.cues = step
            .confirmed
            .iter()
            .map(|c| self.policy.decide(c.label, c.confirmed_at))
            .collect();
        out.scores = Some(smoothed);
        Ok(out)
    }

    /// Closes events still open at end of stream.
    pub fn finish(&mut self) -> Vec<ExpressiveEvent> {
        self.smoother.reset();
        self.segmenter.finish()
    }
}

/// Journal records for one processed frame: landmarks, pose, scores,
/// finalized events, cue decisions.
pub fn frame_records(frame: LandmarkFrame, out: FrameOutput) -> Vec<Record> {
    let mut records = Vec::with_capacity(3 + out.events.len() + out.cues.len());
    records.push(Record::Landmarks(frame));
    records.extend(out.pose.map(Record::Pose));
    records.extend(out.scores.map(Record::Scores));
    records.extend(out.events.into_iter().map(Record::Event));
    records.extend(out.cues.into_iter().map(Record::Cue));
    records
}

/// Streams per-frame outputs to a journal writer in [`frame_records`] order.
pub struct SessionRecorder<W: Write> {
    writer: JournalWriter<W>,
}

impl<W: Write> SessionRecorder<W> {
    pub fn new(writer: JournalWriter<W>, meta: SessionMeta) -> Result<Self, JournalError> {
        let mut writer = writer;
        writer.append(&Record::SessionMeta(meta))?;
        Ok(Self { writer })
    }

    pub fn record(&mut self, frame: &LandmarkFrame, out: &FrameOutput) -> Result<(), JournalError> {
        for r in frame_records(frame.clone(), out.clone()) {
            self.writer.append(&r)?;
        }
        Ok(())
    }

    pub fn record_events(&mut self, events: &[ExpressiveEvent]) -> Result<(), JournalError> {
        for e in events {
            self.writer.append(&Record::Event(*e))?;
        }
        Ok(())
    }

    pub fn writer_mut(&mut self) -> &mut JournalWriter<W> {
        &mut self.writer
    }

    pub fn close(mut self) -> Result<W, JournalError> {
        self.writer.close()
    }
}

/// Offline replay of a whole session into an in-memory journal.
///
/// Speech spans and game trials are appended after the frame records.
pub fn replay(
    pipeline: &mut Pipeline,
    meta: SessionMeta,
    frames: impl IntoIterator<Item = LandmarkFrame>,
    speech: &[SpeechActivitySpan],
    trials: &[GameTrial],
) -> Result<SessionJournal, PipelineError> {
    let mut records = vec![Record::SessionMeta(meta)];
    for frame in frames {
        let out = pipeline.process(&frame)?;
        records.extend(frame_records(frame, out));
    }
    records.extend(pipeline.finish().into_iter().map(Record::Event));
    let mut speech = speech.to_vec();
    speech.sort_by_key(|s| (s.start, s.end));
    records.extend(speech.into_iter().map(Record::SpeechSpan));
    records.extend(trials.iter().cloned().map(Record::GameTrial));
    Ok(SessionJournal::from_records(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affect::{train, Hyperparams};
    use crate::synth::{make_training_set, ExpressionTemplates, Scenario, ScriptedExpression, ScriptedGap};
    use crate::ExpressionLabel;

    fn model() -> ClassifierModel {
        train(&make_training_set(20, 0.005, 3).unwrap(), &Hyperparams::default()).unwrap()
    }

    fn pipeline() -> Pipeline {
        Pipeline::new(model(), ReferenceFaceModel::builtin(), &PipelineConfig::default()).unwrap()
    }

    #[test]
    fn happiness_segment_is_recovered() {
        let mut s = Scenario::neutral(8_000);
        s.noise_sigma = 0.002;
        s.script.push(ScriptedExpression {
            label: ExpressionLabel::Happiness,
            start_ms: 2_000,
            end_ms: 6_000,
            intensity: 1.0,
        });
        let synth = s.generate(&ExpressionTemplates::builtin()).unwrap();
        let mut p = pipeline();
        let journal = replay(&mut p, synth.meta.clone(), synth.frames, &[], &[]).unwrap();
        let events: Vec<_> = journal.events().collect();
        assert_eq!(events.len(), 1, "{events:?}");
        let e = events[0];
        assert_eq!(e.label, ExpressionLabel::Happiness);
        assert!(e.start.abs_diff(2_000_000) <= 250_000, "start {}", e.start);
        assert!(e.end.abs_diff(6_000_000) <= 250_000, "end {}", e.end);
        let cues: Vec<_> = journal.cues().collect();
        assert_eq!(cues.len(), 1);
        assert!(!cues[0].suppressed);
        assert_eq!(cues[0].issued_at, e.confirmed_at);
    }

    #[test]
    fn face_gap_closes_open_events() {
        let mut s = Scenario::neutral(6_000);
        s.script.push(ScriptedExpression {
            label: ExpressionLabel::Surprise,
            start_ms: 1_000,
            end_ms: 5_000,
            intensity: 1.0,
        });
        s.face_gaps.push(ScriptedGap {
            start_ms: 3_000,
            end_ms: 3_500,
        });
        let synth = s.generate(&ExpressionTemplates::builtin()).unwrap();
        let mut p = pipeline();
        let journal = replay(&mut p, synth.meta.clone(), synth.frames, &[], &[]).unwrap();
        let events: Vec<_> = journal.events().collect();
        assert_eq!(events.len(), 2, "{events:?}");
        assert!(events[0].end < 3_000_000 && events[1].start >= 3_500_000);
    }

    #[test]
    fn rejects_non_monotonic_frames() {
        let mut p = pipeline();
        p.process(&LandmarkFrame::absent(10)).unwrap();
        assert!(matches!(
            p.process(&LandmarkFrame::absent(10)),
            Err(PipelineError::NonMonotonic { prev: 10, got: 10 })
        ));
    }

    #[test]
    fn calibration_sets_a_baseline() {
        let cfg = PipelineConfig {
            calibration_frames: 10,
            ..PipelineConfig::default()
        };
        let mut p = Pipeline::new(model(), ReferenceFaceModel::builtin(), &cfg).unwrap();
        let synth = Scenario::neutral(1_000)
            .generate(&ExpressionTemplates::builtin())
            .unwrap();
        for f in &synth.frames[..9] {
            p.process(f).unwrap();
        }
        assert!(p.baseline().is_none());
        p.process(&synth.frames[9]).unwrap();
        assert!(p.baseline().is_some());
        let bad = PipelineConfig {
            calibration_frames: 3,
            ..PipelineConfig::default()
        };
        assert!(Pipeline::new(model(), ReferenceFaceModel::builtin(), &bad).is_err());
    }
}
