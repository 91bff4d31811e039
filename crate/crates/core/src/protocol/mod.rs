//! Client/server round protocol.
//!
//! [`Coordinator`] holds the server's round logic and [`ClientNode`] the
//! client's; both are transport-free. In-process runs call them directly,
//! while [`net`] drives the same objects over TCP with the frame codec in
//! [`message`].

use thiserror::Error;

pub mod client;
pub mod coordinator;
pub mod message;
pub mod net;

pub use client::{ClientNode, NodeTrace, TrainResult};
pub use coordinator::{Coordinator, Phase, Prediction, RoundOutcome, RoundPolicy};
pub use message::{
    decode_frame, encode_frame, read_frame, write_frame, ContextReport, Directive, RoundStatus,
    RpcMessage, UpdateMeta, UploadedUpdate,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("framing: {0}")]
    Framing(String),
    #[error("frame of {0} bytes exceeds the size limit")]
    TooLarge(usize),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("payload: {0}")]
    Payload(String),
    #[error("session: {0}")]
    Session(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}
