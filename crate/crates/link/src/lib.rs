//! The device link: a framed binary protocol carrying landmark frames up and
//! cues down over any ordered, reliable byte stream.

pub mod client;
pub mod clock;
pub mod codec;
pub mod payload;
pub mod session;
pub mod transport;

pub use codec::{decode_all, encode, DecodeError, Decoder, Message, MsgType};
pub use payload::Payload;
