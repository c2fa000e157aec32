//! Per-type payload schemas. Everything except `FRAME_BLOB` (opaque bytes)
//! and `HEARTBEAT` (empty) is canonical JSON, the same encoding the journal
//! uses.

use cuelens_core::canonical::to_canonical_vec;
use cuelens_core::{Cue, LandmarkFrame, SessionMeta};
use serde::{Deserialize, Serialize};

use crate::codec::{Message, MsgType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub protocol_version: u8,
    pub session: SessionMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloAck {
    pub protocol_version: u8,
    pub session_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    VersionMismatch,
    SeqRegression,
    InvalidPayload,
    InvalidFrame,
    UnexpectedMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorInfo {
    pub code: ErrorCode,
    pub message: String,
    /// Sequence number of the offending message, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEnd {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello(Hello),
    HelloAck(HelloAck),
    LandmarkFrame(LandmarkFrame),
    FrameBlob(Vec<u8>),
    Cue(Cue),
    Heartbeat,
    SessionEnd(SessionEnd),
    Error(ErrorInfo),
}

#[derive(Debug, thiserror::Error)]
pub enum PayloadError {
    #[error("{msg_type:?} payload: {source}")]
    Json {
        msg_type: MsgType,
        #[source]
        source: serde_json::Error,
    },
    #[error("heartbeat carries {0} payload bytes")]
    NonEmptyHeartbeat(usize),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::Hello(_) => MsgType::Hello,
            Payload::HelloAck(_) => MsgType::HelloAck,
            Payload::LandmarkFrame(_) => MsgType::LandmarkFrame,
            Payload::FrameBlob(_) => MsgType::FrameBlob,
            Payload::Cue(_) => MsgType::Cue,
            Payload::Heartbeat => MsgType::Heartbeat,
            Payload::SessionEnd(_) => MsgType::SessionEnd,
            Payload::Error(_) => MsgType::Error,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = match self {
            Payload::Hello(p) => to_canonical_vec(p),
            Payload::HelloAck(p) => to_canonical_vec(p),
            Payload::LandmarkFrame(p) => to_canonical_vec(p),
            Payload::Cue(p) => to_canonical_vec(p),
            Payload::SessionEnd(p) => to_canonical_vec(p),
            Payload::Error(p) => to_canonical_vec(p),
            Payload::FrameBlob(bytes) => return bytes.clone(),
            Payload::Heartbeat => return Vec::new(),
        };
        json.expect("payload types serialize infallibly")
    }

    pub fn parse(msg_type: MsgType, bytes: &[u8]) -> Result<Self, PayloadError> {
        fn json<T: serde::de::DeserializeOwned>(msg_type: MsgType, bytes: &[u8]) -> Result<T, PayloadError> {
            serde_json::from_slice(bytes).map_err(|source| PayloadError::Json { msg_type, source })
        }
        Ok(match msg_type {
            MsgType::Hello => Payload::Hello(json(msg_type, bytes)?),
            MsgType::HelloAck => Payload::HelloAck(json(msg_type, bytes)?),
            MsgType::LandmarkFrame => Payload::LandmarkFrame(json(msg_type, bytes)?),
            MsgType::FrameBlob => Payload::FrameBlob(bytes.to_vec()),
            MsgType::Cue => Payload::Cue(json(msg_type, bytes)?),
            MsgType::Heartbeat if bytes.is_empty() => Payload::Heartbeat,
            MsgType::Heartbeat => return Err(PayloadError::NonEmptyHeartbeat(bytes.len())),
            MsgType::SessionEnd => Payload::SessionEnd(json(msg_type, bytes)?),
            MsgType::Error => Payload::Error(json(msg_type, bytes)?),
        })
    }

    pub fn from_message(message: &Message) -> Result<Self, PayloadError> {
        Self::parse(message.msg_type, &message.payload)
    }

    pub fn into_message(&self, seq: u32, timestamp_us: u64) -> Message {
        Message::new(self.msg_type(), seq, timestamp_us, self.to_bytes())
    }
}
