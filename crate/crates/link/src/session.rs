//! Server side of a link session: handshake, then landmark frames through
//! the pipeline, cues back to the device, everything into a journal.

use std::io;
use std::time::Duration;

use cuelens_core::journal::{BlobStore, JournalError, Record, SessionJournal};
use cuelens_core::pipeline::{frame_records, Pipeline};
use cuelens_core::{FrameMeta, LandmarkFrame, Micros};

use crate::clock::Clock;
use crate::codec::{encode, DecodeError, Decoder, Message, MsgType, PROTOCOL_VERSION};
use crate::payload::{ErrorCode, ErrorInfo, HelloAck, Payload, SessionEnd};
use crate::transport::{Recv, Transport};

pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(1);
pub const HEARTBEAT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct LinkSessionConfig {
    /// Silence after which the link is declared dead.
    pub heartbeat_timeout: Duration,
    /// Upper bound on one blocking receive; bounds deadline overshoot.
    pub poll_interval: Duration,
    /// Where FRAME_BLOB payloads go; blobs are dropped without one.
    pub blob_store: Option<BlobStore>,
}

impl Default for LinkSessionConfig {
    fn default() -> Self {
        Self {
            heartbeat_timeout: HEARTBEAT_TIMEOUT,
            poll_interval: Duration::from_millis(20),
            blob_store: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    SessionEnd,
    HeartbeatTimeout,
    TransportClosed,
}

/// Clock stamps of one landmark frame: when its bytes arrived and when its
/// cue decisions were made (and any CUE sent).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTiming {
    pub seq: u32,
    pub timestamp: Micros,
    pub received_us: u64,
    pub decided_us: u64,
}

impl FrameTiming {
    pub fn latency_us(&self) -> u64 {
        self.decided_us.saturating_sub(self.received_us)
    }
}

#[derive(Debug)]
pub struct LinkReport {
    pub journal: SessionJournal,
    pub end_reason: EndReason,
    pub timings: Vec<FrameTiming>,
    pub decode_errors: Vec<DecodeError>,
    /// ERROR messages sent to the device.
    pub errors_sent: Vec<ErrorInfo>,
    /// ERROR messages received from the device.
    pub peer_errors: Vec<ErrorInfo>,
    /// Sequence numbers of the CUE messages sent, in order.
    pub cue_seqs: Vec<u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("device speaks protocol version {got}, expected {PROTOCOL_VERSION}")]
    VersionMismatch { got: u8 },
    #[error("no HELLO within the heartbeat timeout")]
    HandshakeTimeout,
    #[error("transport closed before the handshake completed")]
    HandshakeClosed,
    #[error(transparent)]
    Journal(#[from] JournalError),
}

struct Outbox<'a, T: Transport> {
    transport: &'a mut T,
    seq: u32,
    errors_sent: Vec<ErrorInfo>,
}

fn peer_gone(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
    )
}

impl<T: Transport> Outbox<'_, T> {
    /// A vanished peer is not an error here: the next receive reports the
    /// close and the session finalizes normally.
    fn send(&mut self, payload: &Payload, timestamp_us: u64) -> io::Result<u32> {
        let seq = self.seq;
        self.seq += 1;
        let bytes = encode(&payload.into_message(seq, timestamp_us)).expect("outgoing payloads are small");
        match self.transport.send(&bytes) {
            Err(e) if !peer_gone(&e) => Err(e),
            _ => Ok(seq),
        }
    }

    fn error(&mut self, code: ErrorCode, message: String, seq: Option<u32>) -> io::Result<()> {
        let info = ErrorInfo { code, message, seq };
        self.send(&Payload::Error(info.clone()), 0)?;
        self.errors_sent.push(info);
        Ok(())
    }
}

struct SessionState {
    records: Vec<Record>,
    last_seq: Option<u32>,
    last_frame: Option<(Micros, bool)>,
    last_blob_ts: Option<Micros>,
    timings: Vec<FrameTiming>,
    decode_errors: Vec<DecodeError>,
    peer_errors: Vec<ErrorInfo>,
    cue_seqs: Vec<u32>,
}

enum Step {
    Continue,
    End,
}

/// Runs one device session to completion.
///
/// Protocol violations after the handshake are answered with ERROR and the
/// offending message is dropped; the session only ends on SESSION_END,
/// heartbeat timeout or transport close, and in each case the journal is
/// finalized with whatever was received.
pub fn run_link_session<T: Transport, C: Clock + ?Sized>(
    transport: &mut T,
    pipeline: &mut Pipeline,
    clock: &C,
    config: &LinkSessionConfig,
) -> Result<LinkReport, LinkError> {
    let mut decoder = Decoder::new();
    let mut out = Outbox {
        transport,
        seq: 0,
        errors_sent: Vec::new(),
    };
    let mut state = SessionState {
        records: Vec::new(),
        last_seq: None,
        last_frame: None,
        last_blob_ts: None,
        timings: Vec::new(),
        decode_errors: Vec::new(),
        peer_errors: Vec::new(),
        cue_seqs: Vec::new(),
    };
    let timeout_us = config.heartbeat_timeout.as_micros() as u64;

    // handshake
    let mut last_heard = clock.now_us();
    'handshake: loop {
        while let Some(item) = decoder.next_item() {
            let msg = match item {
                Ok(m) => m,
                Err(e) => {
                    state.decode_errors.push(e);
                    continue;
                }
            };
            last_heard = clock.now_us();
            if msg.msg_type != MsgType::Hello {
                out.error(
                    ErrorCode::UnexpectedMessage,
                    format!("{:?} before HELLO", msg.msg_type),
                    Some(msg.seq),
                )?;
                continue;
            }
            let hello = match Payload::from_message(&msg) {
                Ok(Payload::Hello(h)) => h,
                Ok(_) => unreachable!("HELLO frames parse to HELLO payloads"),
                Err(e) => {
                    out.error(ErrorCode::InvalidPayload, e.to_string(), Some(msg.seq))?;
                    continue;
                }
            };
            let got = if msg.version != PROTOCOL_VERSION {
                msg.version
            } else {
                hello.protocol_version
            };
            if got != PROTOCOL_VERSION {
                out.error(
                    ErrorCode::VersionMismatch,
                    format!("protocol version {got} unsupported, expected {PROTOCOL_VERSION}"),
                    Some(msg.seq),
                )?;
                return Err(LinkError::VersionMismatch { got });
            }
            state.last_seq = Some(msg.seq);
            let ack = HelloAck {
                protocol_version: PROTOCOL_VERSION,
                session_id: hello.session.id.clone(),
            };
            out.send(&Payload::HelloAck(ack), 0)?;
            state.records.push(Record::SessionMeta(hello.session));
            break 'handshake;
        }
        match out.transport.recv(config.poll_interval)? {
            Recv::Data(bytes) => decoder.feed(&bytes),
            Recv::Timeout => {
                if clock.now_us().saturating_sub(last_heard) >= timeout_us {
                    return Err(LinkError::HandshakeTimeout);
                }
            }
            Recv::Closed => return Err(LinkError::HandshakeClosed),
        }
    }

    // streaming
    let mut received_us = clock.now_us();
    let end_reason = 'stream: loop {
        while let Some(item) = decoder.next_item() {
            match item {
                Ok(msg) => {
                    last_heard = clock.now_us();
                    if let Step::End = handle(&msg, received_us, pipeline, clock, config, &mut out, &mut state)? {
                        break 'stream EndReason::SessionEnd;
                    }
                }
                Err(e) => state.decode_errors.push(e),
            }
        }
        match out.transport.recv(config.poll_interval)? {
            Recv::Data(bytes) => {
                received_us = clock.now_us();
                decoder.feed(&bytes);
            }
            Recv::Timeout => {
                if clock.now_us().saturating_sub(last_heard) >= timeout_us {
                    break EndReason::HeartbeatTimeout;
                }
            }
            Recv::Closed => {
                decoder.finish();
                while let Some(item) = decoder.next_item() {
                    match item {
                        Ok(msg) => {
                            if let Step::End = handle(&msg, received_us, pipeline, clock, config, &mut out, &mut state)?
                            {
                                break;
                            }
                        }
                        Err(e) => state.decode_errors.push(e),
                    }
                }
                break EndReason::TransportClosed;
            }
        }
    };

    state.records.extend(pipeline.finish().into_iter().map(Record::Event));
    if end_reason == EndReason::SessionEnd {
        out.send(&Payload::SessionEnd(SessionEnd::default()), 0)?;
    }
    Ok(LinkReport {
        journal: SessionJournal::from_records(state.records)?,
        end_reason,
        timings: state.timings,
        decode_errors: state.decode_errors,
        errors_sent: out.errors_sent,
        peer_errors: state.peer_errors,
        cue_seqs: state.cue_seqs,
    })
}

fn handle<T: Transport, C: Clock + ?Sized>(
    msg: &Message,
    received_us: u64,
    pipeline: &mut Pipeline,
    clock: &C,
    config: &LinkSessionConfig,
    out: &mut Outbox<'_, T>,
    state: &mut SessionState,
) -> io::Result<Step> {
    if let Some(last) = state.last_seq {
        if msg.seq <= last {
            out.error(
                ErrorCode::SeqRegression,
                format!("seq {} does not follow {last}", msg.seq),
                Some(msg.seq),
            )?;
            return Ok(Step::Continue);
        }
    }
    state.last_seq = Some(msg.seq);
    let payload = match Payload::from_message(msg) {
        Ok(p) => p,
        Err(e) => {
            out.error(ErrorCode::InvalidPayload, e.to_string(), Some(msg.seq))?;
            return Ok(Step::Continue);
        }
    };
    match payload {
        Payload::LandmarkFrame(frame) => on_frame(frame, msg.seq, received_us, pipeline, clock, out, state)?,
        Payload::FrameBlob(bytes) => {
            let Some(store) = &config.blob_store else {
                return Ok(Step::Continue);
            };
            let ts = msg.timestamp_us;
            if state.last_blob_ts.is_some_and(|last| ts < last) {
                out.error(
                    ErrorCode::InvalidFrame,
                    format!("blob timestamp {ts} regressed"),
                    Some(msg.seq),
                )?;
                return Ok(Step::Continue);
            }
            let hash = store.put(&bytes)?;
            state.last_blob_ts = Some(ts);
            let face_present = state.last_frame.is_some_and(|(t, face)| t == ts && face);
            state.records.push(Record::FrameMeta(FrameMeta {
                timestamp: ts,
                face_present,
                blob: Some(hash),
            }));
        }
        Payload::Heartbeat => {}
        Payload::SessionEnd(_) => return Ok(Step::End),
        Payload::Error(info) => state.peer_errors.push(info),
        Payload::Hello(_) | Payload::HelloAck(_) | Payload::Cue(_) => {
            out.error(
                ErrorCode::UnexpectedMessage,
                format!("{:?} is not accepted during a session", msg.msg_type),
                Some(msg.seq),
            )?;
        }
    }
    Ok(Step::Continue)
}

fn on_frame<T: Transport, C: Clock + ?Sized>(
    frame: LandmarkFrame,
    seq: u32,
    received_us: u64,
    pipeline: &mut Pipeline,
    clock: &C,
    out: &mut Outbox<'_, T>,
    state: &mut SessionState,
) -> io::Result<()> {
    let output = match pipeline.process(&frame) {
        Ok(o) => o,
        Err(e) => return out.error(ErrorCode::InvalidFrame, e.to_string(), Some(seq)),
    };
    for cue in output.cues.iter().filter(|c| !c.suppressed) {
        let s = out.send(&Payload::Cue(*cue), cue.issued_at)?;
        state.cue_seqs.push(s);
    }
    state.timings.push(FrameTiming {
        seq,
        timestamp: frame.timestamp,
        received_us,
        decided_us: clock.now_us(),
    });
    state.last_frame = Some((frame.timestamp, frame.face_present));
    state.records.extend(frame_records(frame, output));
    Ok(())
}
