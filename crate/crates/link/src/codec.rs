//! Wire framing.
//!
//! ```text
//! A5 47 | version u8 | type u8 | seq u32 | timestamp_us u64 | len u32 | payload | crc32 u32
//! ```
//!
//! Integers are little-endian; the CRC-32 (ISO-HDLC) covers every byte before it.

use std::collections::VecDeque;

pub const MAGIC: [u8; 2] = [0xA5, 0x47];
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 2 + 1 + 1 + 4 + 8 + 4;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD_LEN: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    HelloAck = 0x02,
    LandmarkFrame = 0x03,
    FrameBlob = 0x04,
    Cue = 0x05,
    Heartbeat = 0x06,
    SessionEnd = 0x07,
    Error = 0x08,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::LandmarkFrame,
        MsgType::FrameBlob,
        MsgType::Cue,
        MsgType::Heartbeat,
        MsgType::SessionEnd,
        MsgType::Error,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code).wrapping_sub(1)).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub version: u8,
    pub msg_type: MsgType,
    pub seq: u32,
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(msg_type: MsgType, seq: u32, timestamp_us: u64, payload: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            msg_type,
            seq,
            timestamp_us,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("payload of {0} bytes exceeds the {MAX_PAYLOAD_LEN}-byte limit")]
pub struct PayloadTooLarge(pub usize);

pub fn encode(message: &Message) -> Result<Vec<u8>, PayloadTooLarge> {
    let mut out = Vec::with_capacity(message.encoded_len());
    encode_into(message, &mut out)?;
    Ok(out)
}

pub fn encode_into(message: &Message, out: &mut Vec<u8>) -> Result<(), PayloadTooLarge> {
    let len = message.payload.len();
    if len > MAX_PAYLOAD_LEN {
        return Err(PayloadTooLarge(len));
    }
    let start = out.len();
    out.extend_from_slice(&MAGIC);
    out.push(message.version);
    out.push(message.msg_type.code());
    out.extend_from_slice(&message.seq.to_le_bytes());
    out.extend_from_slice(&message.timestamp_us.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&message.payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

/// Decoder errors; offsets are absolute positions in the fed byte stream.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("{skipped} bytes without frame magic at offset {offset}")]
    BadMagic { offset: u64, skipped: u64 },
    #[error("frame at offset {offset}: CRC mismatch")]
    BadCrc { offset: u64 },
    #[error("frame at offset {offset}: unknown message type {code:#04x}")]
    UnknownMsgType { offset: u64, code: u8 },
    #[error("frame at offset {offset}: declared payload of {len} bytes exceeds the limit")]
    BadLength { offset: u64, len: u64 },
    #[error("stream ended inside a frame at offset {offset}")]
    Truncated { offset: u64 },
}

impl DecodeError {
    pub fn offset(&self) -> u64 {
        match *self {
            DecodeError::BadMagic { offset, .. }
            | DecodeError::BadCrc { offset }
            | DecodeError::UnknownMsgType { offset, .. }
            | DecodeError::BadLength { offset, .. }
            | DecodeError::Truncated { offset } => offset,
        }
    }
}

/// Incremental frame parser.
///
/// After a header or CRC error it resumes one byte past the failed frame
/// start and scans for the next magic, so a corrupted length cannot swallow
/// the frames behind it. Every call to [`Decoder::next_item`] on buffered
/// garbage consumes at least one byte.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: VecDeque<u8>,
    /// Stream offset of `buf[0]`.
    base: u64,
    /// Start of a run of non-magic bytes still being skipped.
    garbage_start: Option<u64>,
    finished: bool,
}

pub type DecodeItem = Result<Message, DecodeError>;

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend(bytes);
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.base
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Declares end of stream; pending partial frames become errors.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    fn consume(&mut self, n: usize) {
        self.buf.drain(..n);
        self.base += n as u64;
    }

    fn flush_garbage(&mut self) -> Option<DecodeError> {
        self.garbage_start.take().map(|offset| DecodeError::BadMagic {
            offset,
            skipped: self.base - offset,
        })
    }

    fn read<const N: usize>(&self, at: usize) -> [u8; N] {
        std::array::from_fn(|i| self.buf[at + i])
    }

    /// Next message or error, `None` when more input is needed (or the
    /// stream is finished and drained).
    pub fn next_item(&mut self) -> Option<DecodeItem> {
        // skip to the next magic candidate
        let mut skip = 0;
        while skip < self.buf.len() {
            if self.buf[skip] == MAGIC[0] && self.buf.get(skip + 1).is_none_or(|b| *b == MAGIC[1]) {
                break;
            }
            skip += 1;
        }
        if skip > 0 {
            self.garbage_start.get_or_insert(self.base);
            self.consume(skip);
        }
        if self.buf.is_empty() {
            return self.flush_garbage().map(Err);
        }
        if let Some(e) = self.flush_garbage() {
            return Some(Err(e));
        }
        let offset = self.base;
        if self.buf.len() < HEADER_LEN {
            return self.stall(offset);
        }
        let len = u32::from_le_bytes(self.read(16)) as usize;
        if len > MAX_PAYLOAD_LEN {
            self.consume(1);
            return Some(Err(DecodeError::BadLength {
                offset,
                len: len as u64,
            }));
        }
        let total = HEADER_LEN + len + CRC_LEN;
        if self.buf.len() < total {
            return self.stall(offset);
        }
        let frame: Vec<u8> = self.buf.range(..total).copied().collect();
        let crc = u32::from_le_bytes(frame[total - CRC_LEN..].try_into().expect("4 bytes"));
        if crc32fast::hash(&frame[..total - CRC_LEN]) != crc {
            self.consume(1);
            return Some(Err(DecodeError::BadCrc { offset }));
        }
        self.consume(total);
        let code = frame[3];
        let Some(msg_type) = MsgType::from_code(code) else {
            return Some(Err(DecodeError::UnknownMsgType { offset, code }));
        };
        Some(Ok(Message {
            version: frame[2],
            msg_type,
            seq: u32::from_le_bytes(frame[4..8].try_into().expect("4 bytes")),
            timestamp_us: u64::from_le_bytes(frame[8..16].try_into().expect("8 bytes")),
            payload: frame[HEADER_LEN..total - CRC_LEN].to_vec(),
        }))
    }

    /// Waits for more input, or at end of stream reports the partial frame
    /// and rescans the bytes after its first.
    fn stall(&mut self, offset: u64) -> Option<DecodeItem> {
        if !self.finished {
            return None;
        }
        self.consume(1);
        Some(Err(DecodeError::Truncated { offset }))
    }

    /// Drains every complete item currently decodable.
    pub fn drain(&mut self) -> Vec<DecodeItem> {
        std::iter::from_fn(|| self.next_item()).collect()
    }
}

/// Decodes a complete byte stream.
pub fn decode_all(bytes: &[u8]) -> (Vec<Message>, Vec<DecodeError>) {
    let mut d = Decoder::new();
    d.feed(bytes);
    d.finish();
    let mut messages = Vec::new();
    let mut errors = Vec::new();
    for item in d.drain() {
        match item {
            Ok(m) => messages.push(m),
            Err(e) => errors.push(e),
        }
    }
    (messages, errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(seq: u32, payload: &[u8]) -> Message {
        Message::new(MsgType::LandmarkFrame, seq, 1_000 * u64::from(seq), payload.to_vec())
    }

    #[test]
    fn heartbeat_is_24_bytes() {
        let hb = Message::new(MsgType::Heartbeat, 0, 0, Vec::new());
        let bytes = encode(&hb).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], &[0xA5, 0x47, 1, 0x06]);
        assert_eq!(encode(&hb).unwrap(), bytes);
    }

    #[test]
    fn crc_covers_the_header() {
        // CRC-32/ISO-HDLC check value
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
        let bytes = encode(&msg(7, b"abc")).unwrap();
        let n = bytes.len();
        let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..n - 4]));
    }

    #[test]
    fn three_frames_decode_cleanly() {
        let mut bytes = Vec::new();
        for i in 0..3 {
            bytes.extend(encode(&msg(i, b"{}")).unwrap());
        }
        let (m, e) = decode_all(&bytes);
        assert_eq!(m.len(), 3);
        assert!(e.is_empty());
        assert_eq!(m[2], msg(2, b"{}"));
    }

    #[test]
    fn empty_input() {
        assert_eq!(decode_all(&[]), (vec![], vec![]));
    }

    #[test]
    fn byte_at_a_time_feeding_matches_bulk() {
        let mut bytes = b"junk".to_vec();
        for i in 0..4 {
            bytes.extend(encode(&msg(i, &[i as u8; 9])).unwrap());
        }
        let mut d = Decoder::new();
        let mut items = Vec::new();
        for b in &bytes {
            d.feed(std::slice::from_ref(b));
            items.extend(d.drain());
        }
        d.finish();
        items.extend(d.drain());
        let (m, e) = decode_all(&bytes);
        assert_eq!(items.iter().filter(|i| i.is_ok()).count(), m.len());
        assert_eq!(e, vec![DecodeError::BadMagic { offset: 0, skipped: 4 }]);
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn flipped_payload_byte_is_one_crc_error_then_recovery() {
        let mut bytes = encode(&msg(1, b"hello world")).unwrap();
        let second = encode(&msg(2, b"next")).unwrap();
        bytes[HEADER_LEN + 3] ^= 0x10;
        let first_len = bytes.len() as u64;
        bytes.extend(&second);
        let (m, e) = decode_all(&bytes);
        assert_eq!(m, vec![msg(2, b"next")]);
        assert_eq!(e[0], DecodeError::BadCrc { offset: 0 });
        assert_eq!(e.len(), 2);
        assert_eq!(
            e[1],
            DecodeError::BadMagic {
                offset: 1,
                skipped: first_len - 1
            }
        );
    }

    #[test]
    fn unknown_type_with_valid_crc_is_skipped_whole() {
        let mut bytes = encode(&msg(1, b"x")).unwrap();
        bytes[3] = 0x7F;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        bytes.extend(encode(&msg(2, b"y")).unwrap());
        let (m, e) = decode_all(&bytes);
        assert_eq!(e, vec![DecodeError::UnknownMsgType { offset: 0, code: 0x7F }]);
        assert_eq!(m, vec![msg(2, b"y")]);
    }

    #[test]
    fn truncated_tail_is_reported() {
        let bytes = encode(&msg(1, b"abcdef")).unwrap();
        let (m, e) = decode_all(&bytes[..bytes.len() - 2]);
        assert!(m.is_empty());
        assert_eq!(e[0], DecodeError::Truncated { offset: 0 });
    }

    #[test]
    fn oversized_length_is_a_header_error() {
        let mut bytes = encode(&msg(1, b"")).unwrap();
        bytes[16..20].copy_from_slice(&(MAX_PAYLOAD_LEN as u32 + 1).to_le_bytes());
        let (m, e) = decode_all(&bytes);
        assert!(m.is_empty());
        assert!(matches!(e[0], DecodeError::BadLength { offset: 0, .. }));
        let big = Message::new(MsgType::FrameBlob, 0, 0, vec![0; MAX_PAYLOAD_LEN + 1]);
        assert_eq!(encode(&big), Err(PayloadTooLarge(MAX_PAYLOAD_LEN + 1)));
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode(&msg(3, b"{\"a\":1}")).unwrap();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut c = bytes.clone();
                c[i] ^= 1 << bit;
                let (m, e) = decode_all(&c);
                assert!(m.is_empty() && !e.is_empty(), "byte {i} bit {bit}");
            }
        }
    }
}
