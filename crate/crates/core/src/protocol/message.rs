//! Length-prefixed frames carrying the three request/response pairs.
//!
//! ```text
//! frame   := len:u32be  type:u8  payload          (len = 1 + |payload|)
//! text    := version:u8 json                      (types 0x01, 0x02)
//! weights := json_len:u32be json count:u32be f32le*count   (0x04..0x06)
//! plain   := json                                 (0x03, 0x07)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::device::{ClientId, ContextVector};
use crate::model::{FlatWeights, TensorSpec};

pub const PROTOCOL_VERSION: u8 = 1;

/// Largest accepted `len` field.
pub const MAX_FRAME_LEN: usize = 64 << 20;

pub const MSG_TEXT_REQ: u8 = 0x01;
pub const MSG_TEXT_RESP: u8 = 0x02;
pub const MSG_GLOBAL_REQ: u8 = 0x03;
pub const MSG_GLOBAL_RESP: u8 = 0x04;
pub const MSG_FL_REQ: u8 = 0x05;
pub const MSG_FL_RESP: u8 = 0x06;
pub const MSG_ERROR: u8 = 0x07;

/// What a client reports before selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextReport {
    Context {
        context: ContextVector,
        n_samples: usize,
    },
    Unavailable {
        reason: String,
    },
}

/// Server instruction in reply to a context report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Directive {
    /// Selection has not run yet; ask again.
    Pending,
    /// Not selected this round.
    Wait,
    Selected {
        epochs: usize,
    },
    RoundSkipped,
    /// No further rounds.
    Finished,
}

/// Scalar part of an uploaded update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMeta {
    pub wer: f64,
    pub n_samples: usize,
    /// Mean observed seconds per batch.
    pub batch_time: f64,
    /// Mean observed battery percent per batch.
    pub battery_drop: f64,
    pub batches_completed: usize,
    pub epochs_completed: usize,
    /// Logical seconds spent training.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadedUpdate {
    pub meta: UpdateMeta,
    pub weights: FlatWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Pending,
    Aggregated,
    /// Nothing was aggregated; the global weights are unchanged.
    Voided,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RpcMessage {
    CommunicatedTextReq {
        client_id: ClientId,
        round: u64,
        report: ContextReport,
    },
    CommunicatedTextResp {
        client_id: ClientId,
        round: u64,
        directive: Directive,
    },
    GetGlobalWeightsReq {
        client_id: ClientId,
        round: u64,
    },
    GetGlobalWeightsResp {
        client_id: ClientId,
        round: u64,
        manifest: Vec<TensorSpec>,
        weights: FlatWeights,
    },
    /// Upload when `update` is set, otherwise a poll for the round result.
    GetFLWeightsReq {
        client_id: ClientId,
        round: u64,
        update: Option<UploadedUpdate>,
    },
    GetFLWeightsResp {
        client_id: ClientId,
        round: u64,
        status: RoundStatus,
        weights: FlatWeights,
    },
    Error {
        client_id: ClientId,
        round: u64,
        message: String,
    },
}

impl RpcMessage {
    pub fn msg_type(&self) -> u8 {
        match self {
            RpcMessage::CommunicatedTextReq { .. } => MSG_TEXT_REQ,
            RpcMessage::CommunicatedTextResp { .. } => MSG_TEXT_RESP,
            RpcMessage::GetGlobalWeightsReq { .. } => MSG_GLOBAL_REQ,
            RpcMessage::GetGlobalWeightsResp { .. } => MSG_GLOBAL_RESP,
            RpcMessage::GetFLWeightsReq { .. } => MSG_FL_REQ,
            RpcMessage::GetFLWeightsResp { .. } => MSG_FL_RESP,
            RpcMessage::Error { .. } => MSG_ERROR,
        }
    }

    pub fn client_id(&self) -> &ClientId {
        match self {
            RpcMessage::CommunicatedTextReq { client_id, .. }
            | RpcMessage::CommunicatedTextResp { client_id, .. }
            | RpcMessage::GetGlobalWeightsReq { client_id, .. }
            | RpcMessage::GetGlobalWeightsResp { client_id, .. }
            | RpcMessage::GetFLWeightsReq { client_id, .. }
            | RpcMessage::GetFLWeightsResp { client_id, .. }
            | RpcMessage::Error { client_id, .. } => client_id,
        }
    }

    pub fn round(&self) -> u64 {
        match self {
            RpcMessage::CommunicatedTextReq { round, .. }
            | RpcMessage::CommunicatedTextResp { round, .. }
            | RpcMessage::GetGlobalWeightsReq { round, .. }
            | RpcMessage::GetGlobalWeightsResp { round, .. }
            | RpcMessage::GetFLWeightsReq { round, .. }
            | RpcMessage::GetFLWeightsResp { round, .. }
            | RpcMessage::Error { round, .. } => *round,
        }
    }

    /// Field-wise equality with floats compared bit for bit.
    pub fn bit_eq(&self, other: &RpcMessage) -> bool {
        encode_frame(self).ok() == encode_frame(other).ok()
    }
}

#[derive(Serialize, Deserialize)]
struct TextReqBody {
    client_id: ClientId,
    round: u64,
    report: ContextReport,
}

#[derive(Serialize, Deserialize)]
struct TextRespBody {
    client_id: ClientId,
    round: u64,
    directive: Directive,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    client_id: ClientId,
    round: u64,
}

#[derive(Serialize, Deserialize)]
struct GlobalRespBody {
    client_id: ClientId,
    round: u64,
    manifest: Vec<TensorSpec>,
}

#[derive(Serialize, Deserialize)]
struct FlReqBody {
    client_id: ClientId,
    round: u64,
    update: Option<UpdateMeta>,
}

#[derive(Serialize, Deserialize)]
struct FlRespBody {
    client_id: ClientId,
    round: u64,
    status: RoundStatus,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    client_id: ClientId,
    round: u64,
    message: String,
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, ProtocolError> {
    serde_json::to_vec(v).map_err(|e| ProtocolError::Payload(e.to_string()))
}

fn text_payload<T: Serialize>(v: &T) -> Result<Vec<u8>, ProtocolError> {
    let mut out = vec![PROTOCOL_VERSION];
    out.extend(json(v)?);
    Ok(out)
}

fn weights_payload<T: Serialize>(v: &T, weights: &[f32]) -> Result<Vec<u8>, ProtocolError> {
    let head = json(v)?;
    let count = u32::try_from(weights.len())
        .map_err(|_| ProtocolError::Payload("too many weights".into()))?;
    let head_len =
        u32::try_from(head.len()).map_err(|_| ProtocolError::Payload("header too long".into()))?;
    let mut out = Vec::with_capacity(8 + head.len() + 4 * weights.len());
    out.extend(head_len.to_be_bytes());
    out.extend(head);
    out.extend(count.to_be_bytes());
    for w in weights {
        out.extend(w.to_le_bytes());
    }
    Ok(out)
}

/// Type byte and payload of a message.
pub fn encode_payload(msg: &RpcMessage) -> Result<(u8, Vec<u8>), ProtocolError> {
    let payload = match msg {
        RpcMessage::CommunicatedTextReq {
            client_id,
            round,
            report,
        } => text_payload(&TextReqBody {
            client_id: client_id.clone(),
            round: *round,
            report: report.clone(),
        })?,
        RpcMessage::CommunicatedTextResp {
            client_id,
            round,
            directive,
        } => text_payload(&TextRespBody {
            client_id: client_id.clone(),
            round: *round,
            directive: *directive,
        })?,
        RpcMessage::GetGlobalWeightsReq { client_id, round } => json(&Envelope {
            client_id: client_id.clone(),
            round: *round,
        })?,
        RpcMessage::GetGlobalWeightsResp {
            client_id,
            round,
            manifest,
            weights,
        } => weights_payload(
            &GlobalRespBody {
                client_id: client_id.clone(),
                round: *round,
                manifest: manifest.clone(),
            },
            weights.as_slice(),
        )?,
        RpcMessage::GetFLWeightsReq {
            client_id,
            round,
            update,
        } => weights_payload(
            &FlReqBody {
                client_id: client_id.clone(),
                round: *round,
                update: update.as_ref().map(|u| u.meta),
            },
            update.as_ref().map(|u| u.weights.as_slice()).unwrap_or(&[]),
        )?,
        RpcMessage::GetFLWeightsResp {
            client_id,
            round,
            status,
            weights,
        } => weights_payload(
            &FlRespBody {
                client_id: client_id.clone(),
                round: *round,
                status: *status,
            },
            weights.as_slice(),
        )?,
        RpcMessage::Error {
            client_id,
            round,
            message,
        } => json(&ErrorBody {
            client_id: client_id.clone(),
            round: *round,
            message: message.clone(),
        })?,
    };
    Ok((msg.msg_type(), payload))
}

pub fn encode_frame(msg: &RpcMessage) -> Result<Vec<u8>, ProtocolError> {
    let (ty, payload) = encode_payload(msg)?;
    let len = payload.len() + 1;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::TooLarge(len));
    }
    let mut out = Vec::with_capacity(4 + len);
    out.extend((len as u32).to_be_bytes());
    out.push(ty);
    out.extend(payload);
    Ok(out)
}

fn parse_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(bytes).map_err(|e| ProtocolError::Payload(e.to_string()))
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, ProtocolError> {
    let end = at.checked_add(4).ok_or(ProtocolError::Payload("offset overflow".into()))?;
    let b = bytes
        .get(at..end)
        .ok_or_else(|| ProtocolError::Payload(format!("payload ends before offset {end}")))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn split_text(payload: &[u8]) -> Result<&[u8], ProtocolError> {
    match payload.split_first() {
        None => Err(ProtocolError::Payload("missing protocol version".into())),
        Some((&PROTOCOL_VERSION, rest)) => Ok(rest),
        Some((&v, _)) => Err(ProtocolError::Version(v)),
    }
}

fn split_weights(payload: &[u8]) -> Result<(&[u8], FlatWeights), ProtocolError> {
    let head_len = read_u32_be(payload, 0)? as usize;
    let head_end = 4usize
        .checked_add(head_len)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| ProtocolError::Payload("json header overruns payload".into()))?;
    let head = &payload[4..head_end];
    let count = read_u32_be(payload, head_end)? as usize;
    let body = &payload[head_end + 4..];
    if count.checked_mul(4) != Some(body.len()) {
        return Err(ProtocolError::Payload(format!(
            "weight count {count} does not match {} trailing bytes",
            body.len()
        )));
    }
    let weights = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((head, FlatWeights(weights)))
}

/// Decodes a payload of the given type.
pub fn decode_payload(ty: u8, payload: &[u8]) -> Result<RpcMessage, ProtocolError> {
    match ty {
        MSG_TEXT_REQ => {
            let b: TextReqBody = parse_json(split_text(payload)?)?;
            Ok(RpcMessage::CommunicatedTextReq {
                client_id: b.client_id,
                round: b.round,
                report: b.report,
            })
        }
        MSG_TEXT_RESP => {
            let b: TextRespBody = parse_json(split_text(payload)?)?;
            Ok(RpcMessage::CommunicatedTextResp {
                client_id: b.client_id,
                round: b.round,
                directive: b.directive,
            })
        }
        MSG_GLOBAL_REQ => {
            let b: Envelope = parse_json(payload)?;
            Ok(RpcMessage::GetGlobalWeightsReq {
                client_id: b.client_id,
                round: b.round,
            })
        }
        MSG_GLOBAL_RESP => {
            let (head, weights) = split_weights(payload)?;
            let b: GlobalRespBody = parse_json(head)?;
            Ok(RpcMessage::GetGlobalWeightsResp {
                client_id: b.client_id,
                round: b.round,
                manifest: b.manifest,
                weights,
            })
        }
        MSG_FL_REQ => {
            let (head, weights) = split_weights(payload)?;
            let b: FlReqBody = parse_json(head)?;
            let update = match b.update {
                Some(meta) => Some(UploadedUpdate { meta, weights }),
                None if weights.is_empty() => None,
                None => {
                    return Err(ProtocolError::Payload(
                        "poll request carries weights".into(),
                    ))
                }
            };
            Ok(RpcMessage::GetFLWeightsReq {
                client_id: b.client_id,
                round: b.round,
                update,
            })
        }
        MSG_FL_RESP => {
            let (head, weights) = split_weights(payload)?;
            let b: FlRespBody = parse_json(head)?;
            Ok(RpcMessage::GetFLWeightsResp {
                client_id: b.client_id,
                round: b.round,
                status: b.status,
                weights,
            })
        }
        MSG_ERROR => {
            let b: ErrorBody = parse_json(payload)?;
            Ok(RpcMessage::Error {
                client_id: b.client_id,
                round: b.round,
                message: b.message,
            })
        }
        other => Err(ProtocolError::UnknownType(other)),
    }
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(RpcMessage, usize), ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(ProtocolError::Framing("zero-length frame has no type".into()));
    }
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::TooLarge(len));
    }
    let total = 4 + len;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let msg = decode_payload(bytes[4], &bytes[5..total])?;
    Ok((msg, total))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &RpcMessage) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<RpcMessage, ProtocolError> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    let len = u32::from_be_bytes(head) as usize;
    if len == 0 {
        return Err(ProtocolError::Framing("zero-length frame has no type".into()));
    }
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_payload(body[0], &body[1..])
}
