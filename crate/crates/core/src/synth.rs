//! Seeded synthetic sessions with ground truth.
//!
//! Faces are the reference model displaced toward per-label expression
//! templates, rotated by the scripted head pose and projected with a weak
//! perspective camera. Expression weights ramp in and out with a 100 ms
//! smoothstep at every scripted segment edge.

use chrono::{DateTime, TimeZone, Utc};
use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affect::LabeledDataset;
use crate::vision::{self, extract_features, normalize_points, CanonicalLandmarks, ReferenceFaceModel};
use crate::{
    ExpressionLabel, GameTrial, HeadPoseSample, LandmarkFrame, Micros, SessionMeta, SpeechActivitySpan, LANDMARK_COUNT,
    MICROS_PER_SEC,
};

const K: usize = ExpressionLabel::COUNT;

/// Pixels per interocular unit at zero yaw.
pub const PIXELS_PER_UNIT: f64 = 100.0;
pub const IMAGE_CENTER: [f64; 2] = [320.0, 240.0];
pub const RAMP: Micros = 100_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid template table: {0}")]
    InvalidTemplates(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    points: Vec<usize>,
    outward: f64,
    up: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    template_version: u32,
    #[serde(default)]
    #[allow(dead_code)]
    units: Option<String>,
    templates: std::collections::BTreeMap<ExpressionLabel, Vec<TemplateEntry>>,
}

const BUILTIN_TEMPLATES: &str = include_str!("../data/expression_templates.json");

/// Per-label landmark displacements relative to the neutral reference face.
#[derive(Debug, Clone)]
pub struct ExpressionTemplates {
    version: u32,
    model: ReferenceFaceModel,
    /// `offsets[label][point]`, in model coordinates (y up).
    offsets: Vec<Vec<[f64; 3]>>,
}

impl ExpressionTemplates {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TEMPLATES, ReferenceFaceModel::builtin()).expect("bundled templates are valid")
    }

    pub fn from_json(json: &str, model: ReferenceFaceModel) -> Result<Self, SynthError> {
        let file: TemplateFile = serde_json::from_str(json).map_err(|e| SynthError::InvalidTemplates(e.to_string()))?;
        let mut offsets = vec![vec![[0.0; 3]; LANDMARK_COUNT]; K];
        for label in ExpressionLabel::ALL {
            let entries = file
                .templates
                .get(&label)
                .ok_or_else(|| SynthError::InvalidTemplates(format!("missing template for {label}")))?;
            for entry in entries {
                for &p in &entry.points {
                    if !(1..=LANDMARK_COUNT).contains(&p) {
                        return Err(SynthError::InvalidTemplates(format!("point {p} out of range")));
                    }
                    let x = model.points()[p - 1][0];
                    let side = if x.abs() < 1e-9 { 0.0 } else { x.signum() };
                    let o = &mut offsets[label.index()][p - 1];
                    o[0] += entry.outward * side;
                    o[1] += entry.up;
                }
            }
        }
        Ok(Self {
            version: file.template_version,
            model,
            offsets,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn model(&self) -> &ReferenceFaceModel {
        &self.model
    }

    /// The 3D face with each label's displacement scaled by `weights[label]`.
    pub fn displaced(&self, weights: &[f64; K]) -> Vec<[f64; 3]> {
        let mut pts = self.model.points().to_vec();
        for (k, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (p, o) in pts.iter_mut().zip(&self.offsets[k]) {
                p[0] += w * o[0];
                p[1] += w * o[1];
                p[2] += w * o[2];
            }
        }
        pts
    }

    /// Frontal projection of a full-intensity expression, in pixel convention.
    pub fn frontal(&self, label: ExpressionLabel) -> Vec<[f64; 2]> {
        let mut w = [0.0; K];
        w[label.index()] = 1.0;
        vision::project(&self.displaced(&w), &Matrix3::identity(), 1.0, [0.0, 0.0])
    }

    /// Canonical landmarks of a label's template.
    pub fn template(&self, label: ExpressionLabel) -> CanonicalLandmarks {
        normalize_points(&self.frontal(label)).expect("templates keep the eyes apart")
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedExpression {
    pub label: ExpressionLabel,
    pub start_ms: u64,
    pub end_ms: u64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedGap {
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedSpeech {
    pub speaker_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPose {
    pub start_ms: u64,
    pub end_ms: u64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTrial {
    pub prompted: ExpressionLabel,
    pub responded: ExpressionLabel,
}

fn default_session_id() -> String {
    "synthetic".to_string()
}

fn default_subject() -> String {
    "synthetic-subject".to_string()
}

fn default_started_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn default_frame_rate() -> f64 {
    30.0
}

/// A scripted interaction session. Times are milliseconds from session start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_session_id")]
    pub session_id: String,
    #[serde(default = "default_subject")]
    pub subject: String,
    #[serde(default = "default_started_at")]
    pub started_at: DateTime<Utc>,
    pub duration_ms: u64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub script: Vec<ScriptedExpression>,
    #[serde(default)]
    pub face_gaps: Vec<ScriptedGap>,
    #[serde(default)]
    pub speech_spans: Vec<ScriptedSpeech>,
    #[serde(default)]
    pub pose_script: Vec<ScriptedPose>,
    /// Per-coordinate landmark noise, interocular units.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub game_trials: Vec<ScriptedTrial>,
}

/// A scripted expression segment, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub label: ExpressionLabel,
    pub start: Micros,
    pub end: Micros,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub meta: SessionMeta,
    pub frames: Vec<LandmarkFrame>,
    /// Scripted pose for every face-present frame.
    pub poses: Vec<HeadPoseSample>,
    pub speech: Vec<SpeechActivitySpan>,
    pub ground_truth: Vec<GroundTruthEvent>,
    pub game_trials: Vec<GameTrial>,
}

const MS: Micros = 1_000;

impl Scenario {
    /// A quiet session: no expressions, no gaps, no noise.
    pub fn neutral(duration_ms: u64) -> Self {
        Self {
            session_id: default_session_id(),
            subject: default_subject(),
            started_at: default_started_at(),
            duration_ms,
            frame_rate_hz: default_frame_rate(),
            script: Vec::new(),
            face_gaps: Vec::new(),
            speech_spans: Vec::new(),
            pose_script: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
            game_trials: Vec::new(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, SynthError> {
        let s: Scenario = serde_json::from_str(json).map_err(|e| SynthError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidScenario(m));
        if self.duration_ms == 0 {
            return bad("duration must be positive".into());
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz <= 1_000.0) {
            return bad(format!("frame rate {} out of range", self.frame_rate_hz));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        let within = |s: u64, e: u64| s < e && e <= self.duration_ms;
        for x in &self.script {
            if !within(x.start_ms, x.end_ms) {
                return bad(format!(
                    "script segment {}..{} ms outside the session",
                    x.start_ms, x.end_ms
                ));
            }
            if !(x.intensity > 0.0 && x.intensity <= 1.0) {
                return bad(format!("intensity {} not in (0, 1]", x.intensity));
            }
        }
        for label in ExpressionLabel::ALL {
            let mut segs: Vec<_> = self.script.iter().filter(|x| x.label == label).collect();
            segs.sort_by_key(|x| x.start_ms);
            if segs.windows(2).any(|w| w[1].start_ms < w[0].end_ms) {
                return bad(format!("overlapping {label} segments"));
            }
        }
        if self.face_gaps.iter().any(|g| !within(g.start_ms, g.end_ms)) {
            return bad("face gap outside the session".into());
        }
        if self.speech_spans.iter().any(|s| !within(s.start_ms, s.end_ms)) {
            return bad("speech span outside the session".into());
        }
        for p in &self.pose_script {
            if !within(p.start_ms, p.end_ms) {
                return bad("pose segment outside the session".into());
            }
            if [p.yaw, p.pitch, p.roll].iter().any(|a| a.is_nan() || a.abs() > 90.0) {
                return bad("pose angles must lie in [-90, 90]".into());
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> SessionMeta {
        SessionMeta {
            id: self.session_id.clone(),
            subject: self.subject.clone(),
            started_at: self.started_at,
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    pub fn frame_count(&self) -> u64 {
        let duration = self.duration_ms * MS;
        (0..).take_while(|&i| self.frame_time(i) < duration).count() as u64
    }

    fn frame_time(&self, i: u64) -> Micros {
        (i as f64 * MICROS_PER_SEC as f64 / self.frame_rate_hz).round() as Micros
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthEvent> {
        let mut v: Vec<_> = self
            .script
            .iter()
            .map(|x| GroundTruthEvent {
                label: x.label,
                start: x.start_ms * MS,
                end: x.end_ms * MS,
                intensity: x.intensity,
            })
            .collect();
        v.sort_by_key(|e| (e.start, e.label));
        v
    }

    pub fn speech(&self) -> Vec<SpeechActivitySpan> {
        let mut v: Vec<_> = self
            .speech_spans
            .iter()
            .map(|s| SpeechActivitySpan {
                speaker_id: s.speaker_id.clone(),
                start: s.start_ms * MS,
                end: s.end_ms * MS,
            })
            .collect();
        v.sort_by_key(|s| (s.start, s.end));
        v
    }

    pub fn trials(&self) -> Vec<GameTrial> {
        self.game_trials
            .iter()
            .enumerate()
            .map(|(i, t)| GameTrial::new(self.session_id.clone(), i as u32, t.prompted, t.responded))
            .collect()
    }

    /// Lazily generates frames with their scripted pose.
    pub fn frames<'a>(&'a self, templates: &'a ExpressionTemplates) -> Result<FrameStream<'a>, SynthError> {
        self.validate()?;
        let noise =
            Normal::new(0.0, self.noise_sigma.max(0.0)).map_err(|e| SynthError::InvalidScenario(e.to_string()))?;
        Ok(FrameStream {
            scenario: self,
            templates,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            noise,
            next: 0,
            duration: self.duration_ms * MS,
        })
    }

    pub fn generate(&self, templates: &ExpressionTemplates) -> Result<SynthSession, SynthError> {
        let mut frames = Vec::new();
        let mut poses = Vec::new();
        for (frame, pose) in self.frames(templates)? {
            frames.push(frame);
            poses.extend(pose);
        }
        Ok(SynthSession {
            meta: self.meta(),
            frames,
            poses,
            speech: self.speech(),
            ground_truth: self.ground_truth(),
            game_trials: self.trials(),
        })
    }

    fn expression_weights(&self, t: Micros) -> [f64; K] {
        let mut w = [0.0; K];
        for x in &self.script {
            let (s, e) = (x.start_ms * MS, x.end_ms * MS);
            if t < s || t > e {
                continue;
            }
            let rise = smoothstep((t - s) as f64 / RAMP as f64);
            let fall = smoothstep((e - t) as f64 / RAMP as f64);
            w[x.label.index()] += x.intensity * rise * fall;
        }
        w
    }

    fn pose_at(&self, t: Micros) -> (f64, f64, f64) {
        self.pose_script
            .iter()
            .find(|p| p.start_ms * MS <= t && t < p.end_ms * MS)
            .map_or((0.0, 0.0, 0.0), |p| (p.yaw, p.pitch, p.roll))
    }

    fn face_visible(&self, t: Micros) -> bool {
        !self.face_gaps.iter().any(|g| g.start_ms * MS <= t && t < g.end_ms * MS)
    }
}

/// Iterator over generated `(frame, scripted pose)` pairs.
pub struct FrameStream<'a> {
    scenario: &'a Scenario,
    templates: &'a ExpressionTemplates,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    next: u64,
    duration: Micros,
}

impl Iterator for FrameStream<'_> {
    type Item = (LandmarkFrame, Option<HeadPoseSample>);

    fn next(&mut self) -> Option<Self::Item> {
        let t = self.scenario.frame_time(self.next);
        if t >= self.duration {
            return None;
        }
        self.next += 1;
        if !self.scenario.face_visible(t) {
            return Some((LandmarkFrame::absent(t), None));
        }
        let weights = self.scenario.expression_weights(t);
        let (yaw, pitch, roll) = self.scenario.pose_at(t);
        let rotation = vision::rotation_from_euler(yaw, pitch, roll);
        let mut points = vision::project(
            &self.templates.displaced(&weights),
            &rotation,
            PIXELS_PER_UNIT,
            IMAGE_CENTER,
        );
        if self.scenario.noise_sigma > 0.0 {
            for p in &mut points {
                p[0] += PIXELS_PER_UNIT * self.noise.sample(&mut self.rng);
                p[1] += PIXELS_PER_UNIT * self.noise.sample(&mut self.rng);
            }
        }
        let pose = HeadPoseSample {
            timestamp: t,
            yaw,
            pitch,
            roll,
        };
        Some((LandmarkFrame::present(t, points), Some(pose)))
    }
}

/// Balanced labeled features from noisy full-intensity frontal templates.
pub fn make_training_set(per_class_count: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset, SynthError> {
    make_training_set_with(&ExpressionTemplates::builtin(), per_class_count, noise_sigma, seed)
}

pub fn make_training_set_with(
    templates: &ExpressionTemplates,
    per_class_count: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset, SynthError> {
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| SynthError::InvalidScenario(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = LabeledDataset::new(format!(
        "synthetic templates v{}: {per_class_count}/class, sigma {noise_sigma}, seed {seed}",
        templates.version()
    ));
    for label in ExpressionLabel::ALL {
        let base = templates.frontal(label);
        for _ in 0..per_class_count {
            let pts: Vec<[f64; 2]> = if noise_sigma > 0.0 {
                base.iter()
                    .map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)])
                    .collect()
            } else {
                base.clone()
            };
            let canon = normalize_points(&pts).map_err(|e| SynthError::InvalidScenario(e.to_string()))?;
            data.push(extract_features(&canon, None), label);
        }
    }
    Ok(data)
}
