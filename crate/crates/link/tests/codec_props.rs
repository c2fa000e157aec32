use cuelens_link::codec::{encode, Decoder, MAX_PAYLOAD_LEN};
use cuelens_link::{decode_all, Message, MsgType};
use proptest::prelude::*;

fn message() -> impl Strategy<Value = Message> {
    (
        prop::sample::select(MsgType::ALL.to_vec()),
        any::<u8>(),
        any::<u32>(),
        any::<u64>(),
        prop::collection::vec(any::<u8>(), 0..300),
    )
        .prop_map(|(msg_type, version, seq, timestamp_us, payload)| Message {
            version,
            msg_type,
            seq,
            timestamp_us,
            payload,
        })
}

proptest! {
    #[test]
    fn round_trip(msgs in prop::collection::vec(message(), 0..8)) {
        let mut bytes = Vec::new();
        for m in &msgs {
            let e = encode(m).unwrap();
            prop_assert_eq!(e.len(), m.encoded_len());
            bytes.extend(e);
        }
        let (decoded, errors) = decode_all(&bytes);
        prop_assert!(errors.is_empty());
        prop_assert_eq!(decoded, msgs);
    }

    #[test]
    fn chunking_does_not_matter(msgs in prop::collection::vec(message(), 1..5), cuts in prop::collection::vec(1usize..64, 1..20)) {
        let bytes: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();
        let mut d = Decoder::new();
        let mut got = Vec::new();
        let mut pos = 0;
        for c in cuts.iter().cycle() {
            if pos >= bytes.len() {
                break;
            }
            let end = (pos + c).min(bytes.len());
            d.feed(&bytes[pos..end]);
            pos = end;
            got.extend(d.drain());
        }
        d.finish();
        got.extend(d.drain());
        let got: Vec<Message> = got.into_iter().map(|r| r.unwrap()).collect();
        prop_assert_eq!(got, msgs);
    }

    #[test]
    fn garbage_never_panics_and_always_progresses(bytes in prop::collection::vec(any::<u8>(), 0..2_000)) {
        let mut d = Decoder::new();
        d.feed(&bytes);
        d.finish();
        let mut last = d.offset();
        while d.next_item().is_some() {
            prop_assert!(d.offset() > last || d.buffered() == 0);
            last = d.offset();
        }
        prop_assert_eq!(d.buffered(), 0);
    }

    #[test]
    fn valid_frames_survive_surrounding_noise(prefix in prop::collection::vec(any::<u8>(), 0..50), m in message()) {
        // noise without the first magic byte cannot fake a frame start
        let prefix: Vec<u8> = prefix.into_iter().filter(|b| *b != 0xA5).collect();
        let mut bytes = prefix.clone();
        bytes.extend(encode(&m).unwrap());
        let (decoded, errors) = decode_all(&bytes);
        prop_assert_eq!(decoded, vec![m]);
        prop_assert_eq!(errors.len(), usize::from(!prefix.is_empty()));
    }
}

#[test]
fn max_payload_is_accepted() {
    let m = Message::new(MsgType::FrameBlob, 1, 2, vec![7; MAX_PAYLOAD_LEN]);
    let (decoded, errors) = decode_all(&encode(&m).unwrap());
    assert!(errors.is_empty());
    assert_eq!(decoded, vec![m]);
}
