//! Bit-exact wire format.
//!
//! A frame is `magic "MPIQ" (4) | version (1) | envelope (27) | payload`.
//! The 27-byte envelope region, all integers little-endian:
//!
//! ```text
//! offset  0   msg_type     u8
//! offset  1   context      u32
//! offset  5   src          u32
//! offset  9   dst          u32
//! offset 13   tag          u32
//! offset 17   payload_len  u64
//! offset 25   src_kind     u8   (0 classical, 1 quantum)
//! offset 26   reserved     u8   (written as 0, ignored on decode)
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MPIQ";
pub const VERSION: u8 = 1;
/// Envelope region size.
pub const HEADER_LEN: usize = 27;
/// Bytes before the payload: magic + version + envelope.
pub const FRAME_PREFIX_LEN: usize = 4 + 1 + HEADER_LEN;
/// Maximum payload size (artifact cap).
pub const PAYLOAD_CAP: u64 = 1 << 32;

/// Message type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Execute = 1,
    Result = 2,
    SyncReady = 3,
    SyncRelease = 4,
    Ping = 5,
    Pong = 6,
    Shutdown = 7,
    Ack = 8,
    Data = 9,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => MsgType::Execute,
            2 => MsgType::Result,
            3 => MsgType::SyncReady,
            4 => MsgType::SyncRelease,
            5 => MsgType::Ping,
            6 => MsgType::Pong,
            7 => MsgType::Shutdown,
            8 => MsgType::Ack,
            9 => MsgType::Data,
            other => return Err(Error::Protocol(format!("unknown msg_type {other}"))),
        })
    }
}

/// Whether the src id is a classical rank or a quantum qrank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SrcKind {
    Classical = 0,
    Quantum = 1,
}

impl SrcKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SrcKind::Classical),
            1 => Ok(SrcKind::Quantum),
            other => Err(Error::Protocol(format!("invalid src_kind {other}"))),
        }
    }
}

/// The typed, tagged, context-scoped message header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub context: u32,
    pub src: u32,
    pub dst: u32,
    pub tag: u32,
    pub payload_len: u64,
    pub src_kind: SrcKind,
}

impl Envelope {
    pub fn new(msg_type: MsgType, context: u32, src: u32, dst: u32, tag: u32) -> Self {
        Self {
            msg_type,
            context,
            src,
            dst,
            tag,
            payload_len: 0,
            src_kind: SrcKind::Classical,
        }
    }

    pub fn quantum(mut self) -> Self {
        self.src_kind = SrcKind::Quantum;
        self
    }
}

/// One wire unit: envelope plus owned payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub envelope: Envelope,
    pub payload: Vec<u8>,
}

impl Frame {
    /// Build a frame; fixes up `payload_len` to match the payload.
    pub fn new(mut envelope: Envelope, payload: Vec<u8>) -> Self {
        envelope.payload_len = payload.len() as u64;
        Self { envelope, payload }
    }

    pub fn total_len(&self) -> usize {
        FRAME_PREFIX_LEN + self.payload.len()
    }
}

fn write_header(buf: &mut [u8], env: &Envelope) {
    buf[0] = env.msg_type as u8;
    buf[1..5].copy_from_slice(&env.context.to_le_bytes());
    buf[5..9].copy_from_slice(&env.src.to_le_bytes());
    buf[9..13].copy_from_slice(&env.dst.to_le_bytes());
    buf[13..17].copy_from_slice(&env.tag.to_le_bytes());
    buf[17..25].copy_from_slice(&env.payload_len.to_le_bytes());
    buf[25] = env.src_kind as u8;
    buf[26] = 0;
}

fn parse_header(buf: &[u8]) -> Result<Envelope> {
    debug_assert!(buf.len() >= HEADER_LEN);
    let msg_type = MsgType::from_u8(buf[0])?;
    let context = u32::from_le_bytes(buf[1..5].try_into().unwrap());
    let src = u32::from_le_bytes(buf[5..9].try_into().unwrap());
    let dst = u32::from_le_bytes(buf[9..13].try_into().unwrap());
    let tag = u32::from_le_bytes(buf[13..17].try_into().unwrap());
    let payload_len = u64::from_le_bytes(buf[17..25].try_into().unwrap());
    let src_kind = SrcKind::from_u8(buf[25])?;
    Ok(Envelope {
        msg_type,
        context,
        src,
        dst,
        tag,
        payload_len,
        src_kind,
    })
}

/// Serialize an envelope and payload into wire bytes.
pub fn encode_frame(env: &Envelope, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() as u64 > PAYLOAD_CAP {
        return Err(Error::Size {
            len: payload.len() as u64,
            cap: PAYLOAD_CAP,
        });
    }
    let mut env = *env;
    env.payload_len = payload.len() as u64;
    let mut buf = vec![0u8; FRAME_PREFIX_LEN + payload.len()];
    buf[0..4].copy_from_slice(&MAGIC);
    buf[4] = VERSION;
    write_header(&mut buf[5..FRAME_PREFIX_LEN], &env);
    buf[FRAME_PREFIX_LEN..].copy_from_slice(payload);
    Ok(buf)
}

/// Parse and validate the fixed frame prefix (magic + version + envelope).
/// Used by both [`decode_frame`] and the streaming channel reader.
pub fn decode_prefix(bytes: &[u8]) -> Result<Envelope> {
    if bytes.len() < FRAME_PREFIX_LEN {
        return Err(Error::IncompleteFrame {
            have: bytes.len(),
            need: FRAME_PREFIX_LEN,
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Protocol(format!(
            "bad magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version(bytes[4]));
    }
    let env = parse_header(&bytes[5..FRAME_PREFIX_LEN])?;
    if env.payload_len > PAYLOAD_CAP {
        return Err(Error::Size {
            len: env.payload_len,
            cap: PAYLOAD_CAP,
        });
    }
    Ok(env)
}

/// Exact inverse of [`encode_frame`]. `bytes` must begin at a frame boundary;
/// trailing bytes after the frame are ignored.
pub fn decode_frame(bytes: &[u8]) -> Result<(Envelope, Vec<u8>)> {
    let env = decode_prefix(bytes)?;
    let need = FRAME_PREFIX_LEN + env.payload_len as usize;
    if bytes.len() < need {
        return Err(Error::IncompleteFrame {
            have: bytes.len(),
            need,
        });
    }
    let payload = bytes[FRAME_PREFIX_LEN..need].to_vec();
    Ok((env, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ack_env() -> Envelope {
        Envelope::new(MsgType::Ack, 0, 1, 2, 3)
    }

    #[test]
    fn header_only_frame_is_32_bytes() {
        let bytes = encode_frame(&ack_env(), &[]).unwrap();
        assert_eq!(bytes.len(), 32);
        let (env, payload) = decode_frame(&bytes).unwrap();
        assert_eq!(env.payload_len, 0);
        assert!(payload.is_empty());
    }

    #[test]
    fn five_byte_payload_gives_37_byte_frame() {
        let bytes = encode_frame(&ack_env(), b"hello").unwrap();
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_frame(&ack_env(), b"x").unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_frame(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode_frame(&ack_env(), &[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_frame(&bytes), Err(Error::Version(9))));
    }

    #[test]
    fn unknown_msg_type_rejected() {
        let mut bytes = encode_frame(&ack_env(), &[]).unwrap();
        bytes[5] = 0xEE;
        assert!(matches!(decode_frame(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_payload_is_incomplete() {
        let bytes = encode_frame(&ack_env(), &[1, 2, 3, 4, 5]).unwrap();
        match decode_frame(&bytes[..bytes.len() - 2]) {
            Err(Error::IncompleteFrame { have, need }) => {
                assert_eq!(have, 35);
                assert_eq!(need, 37);
            }
            other => panic!("expected IncompleteFrame, got {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_incomplete() {
        let bytes = encode_frame(&ack_env(), &[]).unwrap();
        assert!(matches!(
            decode_frame(&bytes[..10]),
            Err(Error::IncompleteFrame { .. })
        ));
    }

    #[test]
    fn golden_frame_bytes() {
        let env = Envelope {
            msg_type: MsgType::Data,
            context: 0x0403_0201,
            src: 0x0807_0605,
            dst: 0x0C0B_0A09,
            tag: 0x100F_0E0D,
            payload_len: 0,
            src_kind: SrcKind::Quantum,
        };
        let bytes = encode_frame(&env, &[0xEE, 0xFF]).unwrap();
        assert_eq!(
            bytes,
            vec![
                b'M', b'P', b'I', b'Q', // magic
                1,    // version
                9,    // msg_type = DATA
                0x01, 0x02, 0x03, 0x04, // context
                0x05, 0x06, 0x07, 0x08, // src
                0x09, 0x0A, 0x0B, 0x0C, // dst
                0x0D, 0x0E, 0x0F, 0x10, // tag
                2, 0, 0, 0, 0, 0, 0, 0, // payload_len
                1, // src_kind = quantum
                0, // reserved
                0xEE, 0xFF, // payload
            ]
        );
    }

    #[test]
    fn round_trip_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..500 {
            let env = Envelope {
                msg_type: MsgType::from_u8(rng.gen_range(1..=9)).unwrap(),
                context: rng.gen(),
                src: rng.gen(),
                dst: rng.gen(),
                tag: rng.gen(),
                payload_len: 0,
                src_kind: if rng.gen() {
                    SrcKind::Quantum
                } else {
                    SrcKind::Classical
                },
            };
            let payload: Vec<u8> = (0..rng.gen_range(0..256)).map(|_| rng.gen()).collect();
            let bytes = encode_frame(&env, &payload).unwrap();
            let (dec_env, dec_payload) = decode_frame(&bytes).unwrap();
            assert_eq!(dec_payload, payload);
            assert_eq!(dec_env.msg_type, env.msg_type);
            assert_eq!(dec_env.context, env.context);
            assert_eq!(dec_env.src, env.src);
            assert_eq!(dec_env.dst, env.dst);
            assert_eq!(dec_env.tag, env.tag);
            assert_eq!(dec_env.src_kind, env.src_kind);
            assert_eq!(dec_env.payload_len, payload.len() as u64);
            // Re-encoding yields identical bytes.
            assert_eq!(encode_frame(&dec_env, &dec_payload).unwrap(), bytes);
        }
    }
}
