//! Wire protocol, connection management, and the two channel kinds (TCP for
//! inter-node paths, in-process queue for co-located endpoints).

mod channel;
mod hub;
mod wire;

pub use channel::{open_channel, Channel, ChannelKind};
pub use hub::{register_local, unregister_local, LocalListener};
pub use wire::{
    decode_frame, decode_prefix, encode_frame, Envelope, Frame, MsgType, SrcKind,
    FRAME_PREFIX_LEN, HEADER_LEN, MAGIC, PAYLOAD_CAP, VERSION,
};
