//! Device side of the link, used by the demo and the tests.

use std::collections::VecDeque;
use std::io;
use std::time::Duration;

use cuelens_core::{Cue, LandmarkFrame, SessionMeta};

use crate::clock::Clock;
use crate::codec::{encode, DecodeError, Decoder, Message, PROTOCOL_VERSION};
use crate::payload::{ErrorInfo, Hello, HelloAck, Payload, PayloadError, SessionEnd};
use crate::session::HEARTBEAT_INTERVAL;
use crate::transport::{Recv, Transport};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("server closed the link")]
    Closed,
    #[error("server reported an error: {0:?}")]
    Rejected(ErrorInfo),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}

pub struct LinkClient<T: Transport> {
    transport: T,
    decoder: Decoder,
    seq: u32,
    inbox: VecDeque<Message>,
    decode_errors: Vec<DecodeError>,
}

impl<T: Transport> LinkClient<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            decoder: Decoder::new(),
            seq: 0,
            inbox: VecDeque::new(),
            decode_errors: Vec::new(),
        }
    }

    pub fn next_seq(&self) -> u32 {
        self.seq
    }

    pub fn decode_errors(&self) -> &[DecodeError] {
        &self.decode_errors
    }

    /// Sends an arbitrary message verbatim; does not touch the seq counter.
    pub fn send_raw(&mut self, message: &Message) -> io::Result<()> {
        let bytes = encode(message).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.transport.send(&bytes)
    }

    /// Sends with the next sequence number and returns it.
    pub fn send(&mut self, payload: &Payload, timestamp_us: u64) -> io::Result<u32> {
        let seq = self.seq;
        self.send_raw(&payload.into_message(seq, timestamp_us))?;
        self.seq += 1;
        Ok(seq)
    }

    pub fn send_frame(&mut self, frame: &LandmarkFrame) -> io::Result<u32> {
        self.send(&Payload::LandmarkFrame(frame.clone()), frame.timestamp)
    }

    pub fn heartbeat(&mut self, timestamp_us: u64) -> io::Result<u32> {
        self.send(&Payload::Heartbeat, timestamp_us)
    }

    fn fill(&mut self, timeout: Duration) -> Result<bool, ClientError> {
        match self.transport.recv(timeout)? {
            Recv::Data(bytes) => {
                self.decoder.feed(&bytes);
                for item in self.decoder.drain() {
                    match item {
                        Ok(m) => self.inbox.push_back(m),
                        Err(e) => self.decode_errors.push(e),
                    }
                }
                Ok(true)
            }
            Recv::Timeout => Ok(false),
            Recv::Closed => Err(ClientError::Closed),
        }
    }

    /// Messages already received, waiting at most `timeout` for the first.
    ///
    /// A close is reported only once nothing is left to return.
    pub fn poll(&mut self, timeout: Duration) -> Result<Vec<Message>, ClientError> {
        let mut wait = if self.inbox.is_empty() { timeout } else { Duration::ZERO };
        loop {
            match self.fill(wait) {
                Ok(true) => wait = Duration::ZERO,
                Ok(false) => break,
                Err(ClientError::Closed) if !self.inbox.is_empty() => break,
                Err(e) => return Err(e),
            }
        }
        Ok(self.inbox.drain(..).collect())
    }

    fn wait_for(
        &mut self,
        timeout: Duration,
        mut want: impl FnMut(&Payload) -> bool,
    ) -> Result<Vec<Payload>, ClientError> {
        let deadline = std::time::Instant::now() + timeout;
        let mut seen = Vec::new();
        loop {
            while let Some(m) = self.inbox.pop_front() {
                let p = Payload::from_message(&m)?;
                let done = want(&p);
                seen.push(p);
                if done {
                    return Ok(seen);
                }
            }
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Err(ClientError::Timeout);
            }
            self.fill(left.min(Duration::from_millis(50)))?;
        }
    }

    pub fn hello(&mut self, session: SessionMeta, timeout: Duration) -> Result<HelloAck, ClientError> {
        let hello = Hello {
            protocol_version: PROTOCOL_VERSION,
            session,
        };
        self.send(&Payload::Hello(hello), 0)?;
        let got = self.wait_for(timeout, |p| matches!(p, Payload::HelloAck(_) | Payload::Error(_)))?;
        match got.into_iter().last() {
            Some(Payload::HelloAck(ack)) => Ok(ack),
            Some(Payload::Error(e)) => Err(ClientError::Rejected(e)),
            _ => unreachable!("wait_for stops on ack or error"),
        }
    }

    /// Sends SESSION_END and collects everything up to the server's echo.
    pub fn end(&mut self, timestamp_us: u64, timeout: Duration) -> Result<Vec<Payload>, ClientError> {
        self.send(&Payload::SessionEnd(SessionEnd::default()), timestamp_us)?;
        self.wait_for(timeout, |p| matches!(p, Payload::SessionEnd(_)))
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

#[derive(Debug, Clone)]
pub struct StreamOptions {
    /// Wall-clock pacing between frames; `None` sends as fast as possible.
    pub pace: Option<Duration>,
    /// Go silent (no SESSION_END, no heartbeats) after this many frames.
    pub drop_after: Option<usize>,
}

#[derive(Debug, Default)]
pub struct StreamOutcome {
    /// `(seq, clock µs at send)` for every frame sent.
    pub sent: Vec<(u32, u64)>,
    pub cues: Vec<Cue>,
    pub errors: Vec<ErrorInfo>,
    /// Whether SESSION_END was sent and echoed.
    pub ended: bool,
}

/// Streams frames with a heartbeat every second, collecting cues as they
/// arrive, then ends the session unless told to drop.
pub fn stream_frames<T: Transport, C: Clock + ?Sized>(
    client: &mut LinkClient<T>,
    frames: impl IntoIterator<Item = LandmarkFrame>,
    clock: &C,
    options: &StreamOptions,
) -> Result<StreamOutcome, ClientError> {
    let mut outcome = StreamOutcome::default();
    let hb_us = HEARTBEAT_INTERVAL.as_micros() as u64;
    let mut last_hb = clock.now_us();
    let mut last_ts = 0;
    let start = std::time::Instant::now();
    let collect =
        |client: &mut LinkClient<T>, outcome: &mut StreamOutcome, wait: Duration| -> Result<(), ClientError> {
            for m in client.poll(wait)? {
                match Payload::from_message(&m)? {
                    Payload::Cue(c) => outcome.cues.push(c),
                    Payload::Error(e) => outcome.errors.push(e),
                    _ => {}
                }
            }
            Ok(())
        };
    for (i, frame) in frames.into_iter().enumerate() {
        if options.drop_after.is_some_and(|n| i >= n) {
            return Ok(outcome);
        }
        if let Some(pace) = options.pace {
            let due = pace * i as u32;
            loop {
                let elapsed = start.elapsed();
                if elapsed >= due {
                    break;
                }
                collect(client, &mut outcome, due - elapsed)?;
            }
        }
        let now = clock.now_us();
        if now.saturating_sub(last_hb) >= hb_us {
            client.heartbeat(frame.timestamp)?;
            last_hb = now;
        }
        last_ts = frame.timestamp;
        let seq = client.send_frame(&frame)?;
        outcome.sent.push((seq, clock.now_us()));
        collect(client, &mut outcome, Duration::ZERO)?;
    }
    for p in client.end(last_ts, Duration::from_secs(10))? {
        match p {
            Payload::Cue(c) => outcome.cues.push(c),
            Payload::Error(e) => outcome.errors.push(e),
            _ => {}
        }
    }
    outcome.ended = true;
    Ok(outcome)
}
