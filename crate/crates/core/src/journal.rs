//! The `AGSJ` append-only session journal.
//!
//! ```text
//! file   = "AGSJ" | version u16 LE | record*
//! record = kind u8 | payload_len u32 LE | payload | crc32 u32 LE
//! crc32  = CRC-32/ISO-HDLC over kind | payload_len | payload
//! ```
//!
//! Payloads are canonical JSON objects (sorted keys, no whitespace), so a
//! decoded record re-encodes to the same bytes.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::canonical::to_canonical_vec;
use crate::{
    Annotation, ClassScores, Cue, ExpressiveEvent, FrameMeta, GameTrial, HeadPoseSample, LandmarkFrame, Micros,
    SessionMeta, SpeechActivitySpan,
};

pub const MAGIC: [u8; 4] = *b"AGSJ";
pub const FORMAT_VERSION: u16 = 1;
pub const FILE_HEADER_LEN: usize = 6;
/// kind + payload length
pub const RECORD_HEADER_LEN: usize = 5;
pub const RECORD_TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD_LEN: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum RecordKind {
    SessionMeta = 1,
    FrameMeta = 2,
    Landmarks = 3,
    Scores = 4,
    Event = 5,
    Cue = 6,
    Pose = 7,
    SpeechSpan = 8,
    Annotation = 9,
    GameTrial = 10,
}

impl RecordKind {
    pub const ALL: [RecordKind; 10] = [
        RecordKind::SessionMeta,
        RecordKind::FrameMeta,
        RecordKind::Landmarks,
        RecordKind::Scores,
        RecordKind::Event,
        RecordKind::Cue,
        RecordKind::Pose,
        RecordKind::SpeechSpan,
        RecordKind::Annotation,
        RecordKind::GameTrial,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == code)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    SessionMeta(SessionMeta),
    FrameMeta(FrameMeta),
    Landmarks(LandmarkFrame),
    Scores(ClassScores),
    Event(ExpressiveEvent),
    Cue(Cue),
    Pose(HeadPoseSample),
    SpeechSpan(SpeechActivitySpan),
    Annotation(Annotation),
    GameTrial(GameTrial),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::SessionMeta(_) => RecordKind::SessionMeta,
            Record::FrameMeta(_) => RecordKind::FrameMeta,
            Record::Landmarks(_) => RecordKind::Landmarks,
            Record::Scores(_) => RecordKind::Scores,
            Record::Event(_) => RecordKind::Event,
            Record::Cue(_) => RecordKind::Cue,
            Record::Pose(_) => RecordKind::Pose,
            Record::SpeechSpan(_) => RecordKind::SpeechSpan,
            Record::Annotation(_) => RecordKind::Annotation,
            Record::GameTrial(_) => RecordKind::GameTrial,
        }
    }

    /// Key that must be non-decreasing across records of the same kind.
    ///
    /// Events are keyed by their end (the moment they are finalized in a live
    /// stream), annotations by their server-assigned id and game trials by
    /// trial index. Session metadata has no key.
    pub fn order_key(&self) -> Option<u64> {
        match self {
            Record::SessionMeta(_) => None,
            Record::FrameMeta(r) => Some(r.timestamp),
            Record::Landmarks(r) => Some(r.timestamp),
            Record::Scores(r) => Some(r.timestamp),
            Record::Event(r) => Some(r.end),
            Record::Cue(r) => Some(r.issued_at),
            Record::Pose(r) => Some(r.timestamp),
            Record::SpeechSpan(r) => Some(r.start),
            Record::Annotation(r) => Some(r.id),
            Record::GameTrial(r) => Some(u64::from(r.trial_index)),
        }
    }

    pub fn payload(&self) -> serde_json::Result<Vec<u8>> {
        match self {
            Record::SessionMeta(r) => to_canonical_vec(r),
            Record::FrameMeta(r) => to_canonical_vec(r),
            Record::Landmarks(r) => to_canonical_vec(r),
            Record::Scores(r) => to_canonical_vec(r),
            Record::Event(r) => to_canonical_vec(r),
            Record::Cue(r) => to_canonical_vec(r),
            Record::Pose(r) => to_canonical_vec(r),
            Record::SpeechSpan(r) => to_canonical_vec(r),
            Record::Annotation(r) => to_canonical_vec(r),
            Record::GameTrial(r) => to_canonical_vec(r),
        }
    }

    pub fn from_payload(kind: RecordKind, payload: &[u8]) -> serde_json::Result<Self> {
        fn de<T: DeserializeOwned>(p: &[u8]) -> serde_json::Result<T> {
            serde_json::from_slice(p)
        }
        Ok(match kind {
            RecordKind::SessionMeta => Record::SessionMeta(de(payload)?),
            RecordKind::FrameMeta => Record::FrameMeta(de(payload)?),
            RecordKind::Landmarks => Record::Landmarks(de(payload)?),
            RecordKind::Scores => Record::Scores(de(payload)?),
            RecordKind::Event => Record::Event(de(payload)?),
            RecordKind::Cue => Record::Cue(de(payload)?),
            RecordKind::Pose => Record::Pose(de(payload)?),
            RecordKind::SpeechSpan => Record::SpeechSpan(de(payload)?),
            RecordKind::Annotation => Record::Annotation(de(payload)?),
            RecordKind::GameTrial => Record::GameTrial(de(payload)?),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a session journal (bad magic)")]
    BadMagic,
    #[error("unsupported journal format version {0}")]
    UnsupportedVersion(u16),
    #[error("CRC mismatch in record {record_index} at byte offset {offset}")]
    CrcMismatch { record_index: usize, offset: u64 },
    #[error("truncated journal: record {record_index} at byte offset {offset} is incomplete")]
    Truncated { record_index: usize, offset: u64 },
    #[error("record {record_index}: unknown record kind {kind}")]
    UnknownKind { record_index: usize, kind: u8 },
    #[error("record {record_index}: invalid payload: {message}")]
    InvalidPayload { record_index: usize, message: String },
    #[error("{kind:?} record with key {key} precedes the previous key {previous}")]
    OutOfOrder { kind: RecordKind, key: u64, previous: u64 },
    #[error("the first record of a journal must be SessionMeta")]
    MissingSessionMeta,
    #[error("payload of {0} bytes exceeds the record size limit")]
    PayloadTooLarge(usize),
    #[error("record cannot be serialized: {0}")]
    Encode(String),
    #[error("journal writer is closed")]
    Closed,
}

/// Frames a record: kind, length, canonical payload and CRC.
pub fn encode_record(record: &Record) -> Result<Vec<u8>, JournalError> {
    let payload = record.payload().map_err(|e| JournalError::Encode(e.to_string()))?;
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(JournalError::PayloadTooLarge(payload.len()));
    }
    let mut buf = Vec::with_capacity(RECORD_HEADER_LEN + payload.len() + RECORD_TRAILER_LEN);
    buf.push(record.kind() as u8);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&payload);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn file_header() -> [u8; FILE_HEADER_LEN] {
    let mut h = [0u8; FILE_HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4..].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h
}

/// Tracks the per-kind ordering rule shared by the writer and the reader.
#[derive(Debug, Clone, Default)]
struct OrderGuard {
    last: [Option<u64>; 11],
    records: usize,
}

impl OrderGuard {
    fn check(&self, record: &Record) -> Result<(), JournalError> {
        if self.records == 0 && record.kind() != RecordKind::SessionMeta {
            return Err(JournalError::MissingSessionMeta);
        }
        if let (Some(key), Some(previous)) = (record.order_key(), self.last[record.kind().slot()]) {
            if key < previous {
                return Err(JournalError::OutOfOrder {
                    kind: record.kind(),
                    key,
                    previous,
                });
            }
        }
        Ok(())
    }

    fn accept(&mut self, record: &Record) {
        if let Some(key) = record.order_key() {
            self.last[record.kind().slot()] = Some(key);
        }
        self.records += 1;
    }
}

/// Single-writer, append-only journal writer.
///
/// Each append writes the whole framed record and flushes it to the sink;
/// [`JournalWriter::sync`] additionally asks the OS to persist file data.
pub struct JournalWriter<W: Write> {
    sink: Option<W>,
    guard: OrderGuard,
    position: u64,
}

impl JournalWriter<BufWriter<File>> {
    /// Creates (or truncates) a journal file and writes its header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file))
    }

    /// Opens an existing journal for appending after validating its contents.
    pub fn open_append(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let journal = read_session(path.as_ref())?;
        let position = std::fs::metadata(path.as_ref())?.len();
        let file = OpenOptions::new().append(true).open(path)?;
        let mut guard = OrderGuard::default();
        for r in &journal.records {
            guard.accept(r);
        }
        Ok(Self {
            sink: Some(BufWriter::new(file)),
            guard,
            position,
        })
    }

    pub fn sync(&mut self) -> Result<(), JournalError> {
        let sink = self.sink.as_mut().ok_or(JournalError::Closed)?;
        sink.flush()?;
        sink.get_ref().sync_data()?;
        Ok(())
    }
}

impl<W: Write> JournalWriter<W> {
    pub fn new(mut sink: W) -> Result<Self, JournalError> {
        sink.write_all(&file_header())?;
        sink.flush()?;
        Ok(Self {
            sink: Some(sink),
            guard: OrderGuard::default(),
            position: FILE_HEADER_LEN as u64,
        })
    }

    pub fn append(&mut self, record: &Record) -> Result<(), JournalError> {
        let sink = self.sink.as_mut().ok_or(JournalError::Closed)?;
        self.guard.check(record)?;
        let bytes = encode_record(record)?;
        sink.write_all(&bytes)?;
        sink.flush()?;
        self.guard.accept(record);
        self.position += bytes.len() as u64;
        Ok(())
    }

    /// Byte offset where the next record will start.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn records_written(&self) -> usize {
        self.guard.records
    }

    pub fn is_closed(&self) -> bool {
        self.sink.is_none()
    }

    /// Flushes and closes the writer, handing back the sink.
    pub fn close(&mut self) -> Result<W, JournalError> {
        let mut sink = self.sink.take().ok_or(JournalError::Closed)?;
        sink.flush()?;
        Ok(sink)
    }
}

/// A fully read (or fully built) session journal.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionJournal {
    records: Vec<Record>,
}

impl SessionJournal {
    /// Validates that `records` starts with session metadata and respects the
    /// per-kind ordering rule.
    pub fn from_records(records: Vec<Record>) -> Result<Self, JournalError> {
        let mut guard = OrderGuard::default();
        for r in &records {
            guard.check(r)?;
            guard.accept(r);
        }
        if records.is_empty() {
            return Err(JournalError::MissingSessionMeta);
        }
        Ok(Self { records })
    }

    pub fn meta(&self) -> &SessionMeta {
        match &self.records[0] {
            Record::SessionMeta(m) => m,
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    /// Encodes the whole journal to its file representation.
    pub fn to_bytes(&self) -> Result<Vec<u8>, JournalError> {
        let mut out = file_header().to_vec();
        for r in &self.records {
            out.extend_from_slice(&encode_record(r)?);
        }
        Ok(out)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), JournalError> {
        let mut w = JournalWriter::create(path)?;
        for r in &self.records {
            w.append(r)?;
        }
        w.sync()?;
        w.close()?;
        Ok(())
    }

    pub fn frames(&self) -> impl Iterator<Item = &LandmarkFrame> {
        self.records.iter().filter_map(|r| match r {
            Record::Landmarks(f) => Some(f),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &ExpressiveEvent> {
        self.records.iter().filter_map(|r| match r {
            Record::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn cues(&self) -> impl Iterator<Item = &Cue> {
        self.records.iter().filter_map(|r| match r {
            Record::Cue(c) => Some(c),
            _ => None,
        })
    }

    pub fn scores(&self) -> impl Iterator<Item = &ClassScores> {
        self.records.iter().filter_map(|r| match r {
            Record::Scores(s) => Some(s),
            _ => None,
        })
    }

    pub fn poses(&self) -> impl Iterator<Item = &HeadPoseSample> {
        self.records.iter().filter_map(|r| match r {
            Record::Pose(p) => Some(p),
            _ => None,
        })
    }

    pub fn speech_spans(&self) -> impl Iterator<Item = &SpeechActivitySpan> {
        self.records.iter().filter_map(|r| match r {
            Record::SpeechSpan(s) => Some(s),
            _ => None,
        })
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.records.iter().filter_map(|r| match r {
            Record::Annotation(a) => Some(a),
            _ => None,
        })
    }

    pub fn game_trials(&self) -> impl Iterator<Item = &GameTrial> {
        self.records.iter().filter_map(|r| match r {
            Record::GameTrial(t) => Some(t),
            _ => None,
        })
    }

    pub fn frame_metas(&self) -> impl Iterator<Item = &FrameMeta> {
        self.records.iter().filter_map(|r| match r {
            Record::FrameMeta(m) => Some(m),
            _ => None,
        })
    }

    /// Timestamp of the last frame (landmark frames, falling back to frame
    /// metadata); 0 for a session without frames.
    pub fn session_end(&self) -> Micros {
        self.frames()
            .map(|f| f.timestamp)
            .max()
            .or_else(|| self.frame_metas().map(|m| m.timestamp).max())
            .unwrap_or(0)
    }
}

pub fn read_session(path: impl AsRef<Path>) -> Result<SessionJournal, JournalError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_journal(&bytes)
}

/// Parses and validates a complete journal image.
pub fn parse_journal(bytes: &[u8]) -> Result<SessionJournal, JournalError> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(JournalError::BadMagic);
    }
    if bytes.len() < FILE_HEADER_LEN {
        return Err(JournalError::Truncated {
            record_index: 0,
            offset: MAGIC.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(JournalError::UnsupportedVersion(version));
    }

    let mut records = Vec::new();
    let mut guard = OrderGuard::default();
    let mut pos = FILE_HEADER_LEN;
    while pos < bytes.len() {
        let record_index = records.len();
        let offset = pos as u64;
        let rest = &bytes[pos..];
        if rest.len() < RECORD_HEADER_LEN {
            return Err(JournalError::Truncated { record_index, offset });
        }
        let len = u32::from_le_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
        let total = RECORD_HEADER_LEN + len + RECORD_TRAILER_LEN;
        if rest.len() < total {
            return Err(JournalError::Truncated { record_index, offset });
        }
        let body = &rest[..RECORD_HEADER_LEN + len];
        let stored = u32::from_le_bytes(rest[RECORD_HEADER_LEN + len..total].try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(JournalError::CrcMismatch { record_index, offset });
        }
        let kind = RecordKind::from_code(rest[0]).ok_or(JournalError::UnknownKind {
            record_index,
            kind: rest[0],
        })?;
        let record =
            Record::from_payload(kind, &body[RECORD_HEADER_LEN..]).map_err(|e| JournalError::InvalidPayload {
                record_index,
                message: e.to_string(),
            })?;
        guard.check(&record)?;
        guard.accept(&record);
        records.push(record);
        pos += total;
    }
    SessionJournal::from_records(records)
}

/// Content-addressed store for optional frame images: `blobs/<hex-sha256>`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    /// `root` is the directory that contains (or will contain) `blobs/`.
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            dir: root.as_ref().join("blobs"),
        }
    }

    pub fn hash(bytes: &[u8]) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(bytes))
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let hash = Self::hash(bytes);
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(&hash);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{hash}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> io::Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "not a blob hash"));
        }
        std::fs::read(self.dir.join(hash))
    }
}
