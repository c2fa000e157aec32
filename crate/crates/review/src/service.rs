//! Query logic over a data directory.
//!
//! Layout: `<name>.agsj` session journals, `<name>.annotations.agsj`
//! annotation journals (a copy of the session metadata followed by
//! Annotation records), and `blobs/` for frame images. The service never
//! writes to a session journal.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::SystemTime;

use chrono::{DateTime, Utc};
use cuelens_core::canonical::to_canonical_vec;
use cuelens_core::highlights::detect_highlights;
use cuelens_core::journal::{read_session, JournalError, JournalWriter, Record, SessionJournal};
use cuelens_core::metrics::{progress_series, session_summary, EngagementMetrics, FaceVisibilityTimeline};
use cuelens_core::{Annotation, ExpressionLabel, ExpressiveEvent, FrameMeta, Micros};
use serde::Serialize;

use crate::views::*;

pub const JOURNAL_EXT: &str = "agsj";
pub const ANNOTATION_SUFFIX: &str = ".annotations.agsj";
pub const MAX_ANNOTATION_CHARS: usize = 2_000;
pub const MAX_TRACK_POINTS: usize = 2_000;
pub const DEFAULT_HIGHLIGHT_PAD: Micros = 3_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("{what} '{id}' not found")]
    NotFound { what: &'static str, id: String },
    #[error("{message}")]
    Invalid { code: &'static str, message: String },
    #[error("data directory unreadable: {0}")]
    DataDir(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Invalid { code, .. } => code,
            ServiceError::DataDir(_) => "data_dir_unreadable",
            ServiceError::Internal(_) => "internal",
        }
    }

    fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        ServiceError::Invalid {
            code,
            message: message.into(),
        }
    }

    fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        ServiceError::NotFound { what, id: id.into() }
    }
}

impl From<JournalError> for ServiceError {
    fn from(e: JournalError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Clone)]
pub struct ReviewConfig {
    pub data_dir: PathBuf,
    pub highlight_pad: Micros,
    pub max_track_points: usize,
    /// Source of annotation `created_at` stamps.
    pub now: Clock,
}

impl ReviewConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            highlight_pad: DEFAULT_HIGHLIGHT_PAD,
            max_track_points: MAX_TRACK_POINTS,
            now: Arc::new(Utc::now),
        }
    }
}

type Fingerprint = Vec<(PathBuf, u64, Option<SystemTime>)>;

struct LoadedSession {
    path: PathBuf,
    journal: SessionJournal,
    metrics: OnceLock<Result<EngagementMetrics, String>>,
}

impl LoadedSession {
    fn id(&self) -> &str {
        &self.journal.meta().id
    }

    fn metrics(&self) -> Result<&EngagementMetrics, ServiceError> {
        self.metrics
            .get_or_init(|| session_summary(&self.journal).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| ServiceError::Internal(e.clone()))
    }

    fn annotation_path(&self) -> PathBuf {
        let stem = self.path.file_stem().unwrap_or_default().to_string_lossy();
        self.path.with_file_name(format!("{stem}{ANNOTATION_SUFFIX}"))
    }

    fn events_by_start(&self) -> Vec<ExpressiveEvent> {
        let mut events: Vec<_> = self.journal.events().copied().collect();
        events.sort_by_key(|e| (e.start, e.label));
        events
    }
}

struct Catalog {
    fingerprint: Fingerprint,
    sessions: BTreeMap<String, Arc<LoadedSession>>,
    warnings: Vec<FileWarning>,
    progress: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

pub struct ReviewService {
    config: ReviewConfig,
    catalog: Mutex<Option<Arc<Catalog>>>,
    annotation_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn is_session_journal(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    path.extension().is_some_and(|e| e == JOURNAL_EXT) && !name.ends_with(ANNOTATION_SUFFIX)
}

fn canonical<T: Serialize>(value: &T) -> Result<Vec<u8>, ServiceError> {
    to_canonical_vec(value).map_err(|e| ServiceError::Internal(e.to_string()))
}

impl ReviewService {
    pub fn new(config: ReviewConfig) -> Self {
        Self {
            config,
            catalog: Mutex::new(None),
            annotation_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ReviewConfig {
        &self.config
    }

    fn fingerprint(&self) -> Result<Fingerprint, ServiceError> {
        let dir = std::fs::read_dir(&self.config.data_dir)
            .map_err(|e| ServiceError::DataDir(format!("{}: {e}", self.config.data_dir.display())))?;
        let mut out = Vec::new();
        for entry in dir {
            let entry = entry.map_err(|e| ServiceError::DataDir(e.to_string()))?;
            let path = entry.path();
            if !is_session_journal(&path) {
                continue;
            }
            let meta = entry.metadata().ok();
            out.push((
                path,
                meta.as_ref().map_or(0, |m| m.len()),
                meta.and_then(|m| m.modified().ok()),
            ));
        }
        out.sort();
        Ok(out)
    }

    /// Current catalog; rebuilt whenever the set of journal files (or their
    /// sizes and modification times) changes.
    fn catalog(&self) -> Result<Arc<Catalog>, ServiceError> {
        let fingerprint = self.fingerprint()?;
        let mut guard = self.catalog.lock().expect("catalog lock");
        if let Some(c) = guard.as_ref() {
            if c.fingerprint == fingerprint {
                return Ok(Arc::clone(c));
            }
        }
        let mut sessions = BTreeMap::new();
        let mut warnings = Vec::new();
        for (path, _, _) in &fingerprint {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            match read_session(path) {
                Ok(journal) => {
                    let loaded = LoadedSession {
                        path: path.clone(),
                        journal,
                        metrics: OnceLock::new(),
                    };
                    let id = loaded.id().to_string();
                    match sessions.entry(id) {
                        Entry::Occupied(e) => warnings.push(FileWarning {
                            file,
                            error: format!("duplicate session id '{}'", e.key()),
                        }),
                        Entry::Vacant(e) => {
                            e.insert(Arc::new(loaded));
                        }
                    }
                }
                Err(e) => warnings.push(FileWarning {
                    file,
                    error: e.to_string(),
                }),
            }
        }
        let catalog = Arc::new(Catalog {
            fingerprint,
            sessions,
            warnings,
            progress: Mutex::new(HashMap::new()),
        });
        *guard = Some(Arc::clone(&catalog));
        Ok(catalog)
    }

    fn session(&self, id: &str) -> Result<Arc<LoadedSession>, ServiceError> {
        self.catalog()?
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("session", id))
    }

    fn annotation_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.annotation_locks.lock().expect("lock table");
        Arc::clone(locks.entry(id.to_string()).or_default())
    }

    /// Stored annotations sorted by timestamp, then id.
    fn annotations(&self, session: &LoadedSession) -> Result<Vec<Annotation>, ServiceError> {
        let lock = self.annotation_lock(session.id());
        let _held = lock.lock().expect("annotation lock");
        let path = session.annotation_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<Annotation> = read_session(&path)?.annotations().cloned().collect();
        out.sort_by_key(|a| (a.timestamp_in_session, a.id));
        Ok(out)
    }

    pub fn list_sessions(&self) -> Result<SessionListView, ServiceError> {
        let catalog = self.catalog()?;
        let mut sessions = Vec::with_capacity(catalog.sessions.len());
        for s in catalog.sessions.values() {
            let j = &s.journal;
            let meta = j.meta();
            let events = s.events_by_start();
            let clips = detect_highlights(&events, self.config.highlight_pad, j.session_end());
            let issued = j.cues().filter(|c| !c.suppressed).count() as u64;
            sessions.push(SessionSummaryView {
                schema_version: SCHEMA_VERSION,
                session_id: meta.id.clone(),
                subject: meta.subject.clone(),
                started_at: meta.started_at,
                frame_rate_hz: meta.frame_rate_hz,
                session_end_us: j.session_end(),
                frame_count: j.frames().count() as u64,
                event_count: events.len() as u64,
                issued_cue_count: issued,
                suppressed_cue_count: j.cues().count() as u64 - issued,
                clip_count: clips.len() as u64,
                annotation_count: self.annotations(s)?.len() as u64,
            });
        }
        sessions.sort_by(|a, b| (b.started_at, &b.session_id).cmp(&(a.started_at, &a.session_id)));
        Ok(SessionListView {
            schema_version: SCHEMA_VERSION,
            sessions,
            warnings: catalog.warnings.clone(),
        })
    }

    pub fn timeline(&self, session_id: &str) -> Result<TimelineView, ServiceError> {
        let s = self.session(session_id)?;
        let j = &s.journal;
        let events = s.events_by_start();
        let session_end = j.session_end();
        let clips = detect_highlights(&events, self.config.highlight_pad, session_end)
            .into_iter()
            .enumerate()
            .map(|(i, c)| ClipView::new(i, c))
            .collect();
        let visibility = FaceVisibilityTimeline::from_frames(j.frames().map(|f| (f.timestamp, f.face_present)));
        Ok(TimelineView {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            subject: j.meta().subject.clone(),
            started_at: j.meta().started_at,
            session_end_us: session_end,
            highlight_pad_us: self.config.highlight_pad,
            events,
            cues: j.cues().cloned().collect(),
            clips,
            face_visibility: visibility.spans().to_vec(),
            score_tracks: self.score_tracks(j),
            annotations: self.annotations(&s)?,
        })
    }

    fn score_tracks(&self, j: &SessionJournal) -> ScoreTracks {
        let scores: Vec<_> = j.scores().collect();
        let cap = self.config.max_track_points.max(1);
        let stride = scores.len().div_ceil(cap).max(1);
        let picked: Vec<_> = scores.iter().step_by(stride).collect();
        ScoreTracks {
            stride,
            timestamps: picked.iter().map(|s| s.timestamp).collect(),
            scores: ExpressionLabel::ALL
                .iter()
                .map(|l| (*l, picked.iter().map(|s| s.score(*l)).collect()))
                .collect(),
        }
    }

    pub fn metrics(&self, session_id: &str) -> Result<MetricsView, ServiceError> {
        let s = self.session(session_id)?;
        Ok(MetricsView {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            metrics: s.metrics()?.clone(),
        })
    }

    /// Frame references inside one highlight clip. Sessions recorded without
    /// frame metadata get references derived from their landmark frames.
    pub fn highlight_frames(&self, session_id: &str, clip: &str) -> Result<HighlightFramesView, ServiceError> {
        let s = self.session(session_id)?;
        let j = &s.journal;
        let clips = detect_highlights(&s.events_by_start(), self.config.highlight_pad, j.session_end());
        let index: usize = clip.parse().map_err(|_| ServiceError::not_found("clip", clip))?;
        let c = clips
            .into_iter()
            .nth(index)
            .ok_or_else(|| ServiceError::not_found("clip", clip))?;
        let inside = |t: Micros| c.start <= t && t <= c.end;
        let mut frames: Vec<FrameMeta> = j.frame_metas().filter(|m| inside(m.timestamp)).cloned().collect();
        let landmarks: Vec<_> = j.frames().filter(|f| inside(f.timestamp)).cloned().collect();
        if j.frame_metas().next().is_none() {
            frames = landmarks
                .iter()
                .map(|f| FrameMeta {
                    timestamp: f.timestamp,
                    face_present: f.face_present,
                    blob: None,
                })
                .collect();
        }
        let blobs: BTreeSet<String> = frames.iter().filter_map(|f| f.blob.clone()).collect();
        Ok(HighlightFramesView {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            clip: ClipView::new(index, c),
            frames,
            blobs: blobs.into_iter().collect(),
            landmarks,
        })
    }

    /// Validates and durably appends an annotation; ids are assigned per
    /// session starting at 1.
    pub fn post_annotation(&self, session_id: &str, new: NewAnnotation) -> Result<AnnotationView, ServiceError> {
        let s = self.session(session_id)?;
        if new.text.trim().is_empty() {
            return Err(ServiceError::invalid("empty_text", "annotation text is empty"));
        }
        let chars = new.text.chars().count();
        if chars > MAX_ANNOTATION_CHARS {
            return Err(ServiceError::invalid(
                "text_too_long",
                format!("annotation text has {chars} characters, limit {MAX_ANNOTATION_CHARS}"),
            ));
        }
        let end = s.journal.session_end();
        if new.timestamp_in_session > end {
            return Err(ServiceError::invalid(
                "timestamp_out_of_range",
                format!(
                    "timestamp {} us outside session [0, {end}] us",
                    new.timestamp_in_session
                ),
            ));
        }
        let lock = self.annotation_lock(session_id);
        let _held = lock.lock().expect("annotation lock");
        let path = s.annotation_path();
        let (mut writer, next_id) = if path.exists() {
            let last = read_session(&path)?.annotations().map(|a| a.id).max().unwrap_or(0);
            (JournalWriter::open_append(&path)?, last + 1)
        } else {
            let mut w = JournalWriter::create(&path)?;
            w.append(&Record::SessionMeta(s.journal.meta().clone()))?;
            (w, 1)
        };
        let annotation = Annotation {
            id: next_id,
            session_id: session_id.to_string(),
            author: new.author,
            timestamp_in_session: new.timestamp_in_session,
            text: new.text,
            created_at: (self.config.now)(),
        };
        writer.append(&Record::Annotation(annotation.clone()))?;
        writer.sync()?;
        writer.close()?;
        Ok(AnnotationView {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            annotation,
        })
    }

    /// Canonical JSON of the subject's progress view, cached until the set
    /// of journals changes.
    pub fn progress_json(&self, subject: &str) -> Result<Arc<Vec<u8>>, ServiceError> {
        let catalog = self.catalog()?;
        if let Some(hit) = catalog.progress.lock().expect("progress cache").get(subject) {
            return Ok(Arc::clone(hit));
        }
        let body = Arc::new(canonical(&self.compute_progress(&catalog, subject)?)?);
        catalog
            .progress
            .lock()
            .expect("progress cache")
            .insert(subject.to_string(), Arc::clone(&body));
        Ok(body)
    }

    pub fn progress(&self, subject: &str) -> Result<ProgressView, ServiceError> {
        let catalog = self.catalog()?;
        self.compute_progress(&catalog, subject)
    }

    fn compute_progress(&self, catalog: &Catalog, subject: &str) -> Result<ProgressView, ServiceError> {
        let mut inputs = Vec::new();
        for s in catalog
            .sessions
            .values()
            .filter(|s| s.journal.meta().subject == subject)
        {
            inputs.push((s.journal.meta().clone(), s.metrics()?.clone()));
        }
        if inputs.is_empty() {
            return Err(ServiceError::not_found("subject", subject));
        }
        let series = progress_series(subject, &inputs);
        Ok(ProgressView {
            schema_version: SCHEMA_VERSION,
            subject: subject.to_string(),
            session_ids: series.points.iter().map(|p| p.session_id.clone()).collect(),
            series,
        })
    }

    pub fn list_sessions_json(&self) -> Result<Vec<u8>, ServiceError> {
        canonical(&self.list_sessions()?)
    }

    pub fn timeline_json(&self, session_id: &str) -> Result<Vec<u8>, ServiceError> {
        canonical(&self.timeline(session_id)?)
    }

    pub fn metrics_json(&self, session_id: &str) -> Result<Vec<u8>, ServiceError> {
        canonical(&self.metrics(session_id)?)
    }

    pub fn highlight_frames_json(&self, session_id: &str, clip: &str) -> Result<Vec<u8>, ServiceError> {
        canonical(&self.highlight_frames(session_id, clip)?)
    }

    pub fn post_annotation_json(&self, session_id: &str, body: &[u8]) -> Result<Vec<u8>, ServiceError> {
        let new: NewAnnotation =
            serde_json::from_slice(body).map_err(|e| ServiceError::invalid("invalid_body", e.to_string()))?;
        canonical(&self.post_annotation(session_id, new)?)
    }
}

pub fn error_json(e: &ServiceError) -> Vec<u8> {
    let view = ErrorView {
        schema_version: SCHEMA_VERSION,
        error: ErrorBody {
            code: e.code().to_string(),
            message: e.to_string(),
        },
    };
    to_canonical_vec(&view).expect("error views serialize")
}
