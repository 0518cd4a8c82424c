//! Wire protocol between the rich and trusted worlds.
//!
//! Every logical message is framed as one or more chunks. Frame layout,
//! little-endian, bit-exact on both transports:
//!
//! ```text
//! command tag    u32
//! payload length u64     bytes of payload in THIS frame
//! chunk index    u32
//! chunk count    u32
//! payload        [payload length] bytes
//! ```
//!
//! A payload never exceeds the shared-buffer size per frame; larger
//! payloads are split into `ceil(len / buffer)` chunks and reassembled
//! exactly. Zero-length payloads still occupy one frame.

use std::io::{Read, Write};

use crate::bytes::{push_u32, push_u64, ByteReader};
use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::privacy::{OutputPolicy, SanitizedOutput};
use crate::tensor::{Shape, Tensor};

pub const FRAME_HEADER_LEN: u64 = 20;

pub const CMD_LOAD_SEALED: u32 = 1;
pub const CMD_FORWARD: u32 = 2;
pub const CMD_BACKWARD: u32 = 3;
pub const CMD_UPDATE: u32 = 4;
pub const CMD_GET_OUTPUT: u32 = 5;
pub const CMD_SAVE_SEALED: u32 = 6;
pub const CMD_TEARDOWN: u32 = 7;

pub const REPLY_OK: u32 = 100;
pub const REPLY_SANITIZED: u32 = 101;
pub const REPLY_DELTA: u32 = 102;
pub const REPLY_SEALED: u32 = 103;
pub const REPLY_STATS: u32 = 104;
pub const REPLY_ERROR: u32 = 199;

/// Commands and replies crossing the world boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldMessage {
    /// Architecture text, loss-report cadence, and the sealed container.
    /// An empty container field tells the trusted side to read its
    /// `--sealed` path instead.
    LoadSealed {
        cfg_text: String,
        loss_report_every: u64,
        container: Vec<u8>,
    },
    /// Boundary activation plus execution context. The policy locks on
    /// first use for the rest of the session.
    Forward {
        activation: Tensor,
        mode: Mode,
        step: u64,
        policy: OutputPolicy,
    },
    /// Label for the trusted loss; `eta` applies the trusted-side update
    /// in the same exchange when `apply_update` is set.
    Backward {
        label: u32,
        eta: f32,
        apply_update: bool,
    },
    /// Apply stashed gradients at rate `eta`.
    Update { eta: f32 },
    GetOutput { policy: OutputPolicy },
    SaveSealed,
    Teardown,

    Ok,
    Sanitized { output: SanitizedOutput },
    BoundaryDelta {
        delta: Tensor,
        /// Policy-gated aggregate training loss, when due.
        loss_report: Option<f32>,
    },
    SealedBytes { container: Vec<u8> },
    Stats {
        trusted_nanos: u64,
        ledger_high_water: u64,
    },
    Error { category: u8, message: String },
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    push_u32(out, t.shape().rank() as u32);
    for &e in t.shape().extents() {
        push_u32(out, e as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let rank = r.u32("tensor rank")? as usize;
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(r.u32("tensor extent")? as usize);
    }
    let shape = Shape::new(extents)?;
    let data = r.f32_vec(shape.count(), "tensor data")?;
    Tensor::new(shape, data)
}

impl WorldMessage {
    /// `(command tag, logical payload)`.
    pub fn encode(&self) -> (u32, Vec<u8>) {
        let mut p = Vec::new();
        let tag = match self {
            WorldMessage::LoadSealed {
                cfg_text,
                loss_report_every,
                container,
            } => {
                push_u32(&mut p, cfg_text.len() as u32);
                p.extend_from_slice(cfg_text.as_bytes());
                push_u64(&mut p, *loss_report_every);
                p.extend_from_slice(container);
                CMD_LOAD_SEALED
            }
            WorldMessage::Forward {
                activation,
                mode,
                step,
                policy,
            } => {
                p.push(match mode {
                    Mode::Infer => 0,
                    Mode::Train => 1,
                });
                p.extend_from_slice(&policy.to_wire());
                push_u64(&mut p, *step);
                push_tensor(&mut p, activation);
                CMD_FORWARD
            }
            WorldMessage::Backward {
                label,
                eta,
                apply_update,
            } => {
                push_u32(&mut p, *label);
                p.extend_from_slice(&eta.to_le_bytes());
                p.push(*apply_update as u8);
                CMD_BACKWARD
            }
            WorldMessage::Update { eta } => {
                p.extend_from_slice(&eta.to_le_bytes());
                CMD_UPDATE
            }
            WorldMessage::GetOutput { policy } => {
                p.extend_from_slice(&policy.to_wire());
                CMD_GET_OUTPUT
            }
            WorldMessage::SaveSealed => CMD_SAVE_SEALED,
            WorldMessage::Teardown => CMD_TEARDOWN,
            WorldMessage::Ok => REPLY_OK,
            WorldMessage::Sanitized { output } => {
                p.extend_from_slice(&output.to_bytes());
                REPLY_SANITIZED
            }
            WorldMessage::BoundaryDelta { delta, loss_report } => {
                match loss_report {
                    Some(v) => {
                        p.push(1);
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    None => p.push(0),
                }
                push_tensor(&mut p, delta);
                REPLY_DELTA
            }
            WorldMessage::SealedBytes { container } => {
                p.extend_from_slice(container);
                REPLY_SEALED
            }
            WorldMessage::Stats {
                trusted_nanos,
                ledger_high_water,
            } => {
                push_u64(&mut p, *trusted_nanos);
                push_u64(&mut p, *ledger_high_water);
                REPLY_STATS
            }
            WorldMessage::Error { category, message } => {
                p.push(*category);
                p.extend_from_slice(message.as_bytes());
                REPLY_ERROR
            }
        };
        (tag, p)
    }

    pub fn decode(tag: u32, payload: &[u8]) -> Result<WorldMessage> {
        let mut r = ByteReader::new(payload);
        let msg = match tag {
            CMD_LOAD_SEALED => {
                let cfg_len = r.u32("cfg length")? as usize;
                let cfg_bytes = r.take(cfg_len, "cfg text")?;
                let cfg_text = std::str::from_utf8(cfg_bytes)
                    .map_err(|_| Error::Framing("cfg text is not UTF-8".into()))?
                    .to_string();
                let loss_report_every = r.u64("loss report cadence")?;
                let container = r.take(r.remaining(), "container")?.to_vec();
                WorldMessage::LoadSealed {
                    cfg_text,
                    loss_report_every,
                    container,
                }
            }
            CMD_FORWARD => {
                let mode = match r.take(1, "mode")?[0] {
                    0 => Mode::Infer,
                    1 => Mode::Train,
                    m => return Err(Error::Framing(format!("unknown mode byte {m}"))),
                };
                let pw = r.take(2, "policy")?;
                let policy = OutputPolicy::from_wire([pw[0], pw[1]])?;
                let step = r.u64("step")?;
                let activation = read_tensor(&mut r)?;
                r.finish()?;
                WorldMessage::Forward {
                    activation,
                    mode,
                    step,
                    policy,
                }
            }
            CMD_BACKWARD => {
                let label = r.u32("label")?;
                let eta_b = r.take(4, "eta")?;
                let eta = f32::from_le_bytes([eta_b[0], eta_b[1], eta_b[2], eta_b[3]]);
                let apply_update = r.take(1, "apply flag")?[0] != 0;
                r.finish()?;
                WorldMessage::Backward {
                    label,
                    eta,
                    apply_update,
                }
            }
            CMD_UPDATE => {
                let eta_b = r.take(4, "eta")?;
                r.finish()?;
                WorldMessage::Update {
                    eta: f32::from_le_bytes([eta_b[0], eta_b[1], eta_b[2], eta_b[3]]),
                }
            }
            CMD_GET_OUTPUT => {
                let pw = r.take(2, "policy")?;
                r.finish()?;
                WorldMessage::GetOutput {
                    policy: OutputPolicy::from_wire([pw[0], pw[1]])?,
                }
            }
            CMD_SAVE_SEALED => WorldMessage::SaveSealed,
            CMD_TEARDOWN => WorldMessage::Teardown,
            REPLY_OK => WorldMessage::Ok,
            REPLY_SANITIZED => WorldMessage::Sanitized {
                output: SanitizedOutput::from_bytes(payload)?,
            },
            REPLY_DELTA => {
                let loss_report = match r.take(1, "report flag")?[0] {
                    0 => None,
                    _ => {
                        let b = r.take(4, "report value")?;
                        Some(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    }
                };
                let delta = read_tensor(&mut r)?;
                r.finish()?;
                WorldMessage::BoundaryDelta { delta, loss_report }
            }
            REPLY_SEALED => WorldMessage::SealedBytes {
                container: payload.to_vec(),
            },
            REPLY_STATS => {
                let trusted_nanos = r.u64("trusted nanos")?;
                let ledger_high_water = r.u64("ledger high water")?;
                r.finish()?;
                WorldMessage::Stats {
                    trusted_nanos,
                    ledger_high_water,
                }
            }
            REPLY_ERROR => {
                let category = r.take(1, "error category")?[0];
                let message = String::from_utf8_lossy(r.take(r.remaining(), "message")?)
                    .into_owned();
                WorldMessage::Error { category, message }
            }
            other => return Err(Error::Framing(format!("unknown command tag {other}"))),
        };
        Ok(msg)
    }
}

/// Number of frames a payload occupies under a given buffer size.
pub fn chunk_count(payload_len: u64, buffer: u64) -> u32 {
    if payload_len == 0 {
        1
    } else {
        payload_len.div_ceil(buffer) as u32
    }
}

/// Total bytes on the wire for one logical message (payload plus one
/// header per frame).
pub fn wire_bytes(payload_len: u64, buffer: u64) -> u64 {
    payload_len + FRAME_HEADER_LEN * chunk_count(payload_len, buffer) as u64
}

/// Split a logical message into frames of at most `buffer` payload bytes.
pub fn frame_message(tag: u32, payload: &[u8], buffer: u64) -> Vec<Vec<u8>> {
    let count = chunk_count(payload.len() as u64, buffer);
    let mut frames = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let lo = (idx as u64 * buffer) as usize;
        let hi = ((idx as u64 + 1) * buffer).min(payload.len() as u64) as usize;
        let slice = &payload[lo..hi];
        let mut frame = Vec::with_capacity(FRAME_HEADER_LEN as usize + slice.len());
        push_u32(&mut frame, tag);
        push_u64(&mut frame, slice.len() as u64);
        push_u32(&mut frame, idx);
        push_u32(&mut frame, count);
        frame.extend_from_slice(slice);
        frames.push(frame);
    }
    frames
}

struct FrameHeader {
    tag: u32,
    len: u64,
    idx: u32,
    count: u32,
}

fn read_header(reader: &mut dyn Read) -> Result<FrameHeader> {
    let mut h = [0u8; FRAME_HEADER_LEN as usize];
    reader.read_exact(&mut h)?;
    Ok(FrameHeader {
        tag: u32::from_le_bytes([h[0], h[1], h[2], h[3]]),
        len: u64::from_le_bytes([h[4], h[5], h[6], h[7], h[8], h[9], h[10], h[11]]),
        idx: u32::from_le_bytes([h[12], h[13], h[14], h[15]]),
        count: u32::from_le_bytes([h[16], h[17], h[18], h[19]]),
    })
}

/// Read one logical message (all frames) from a stream. Returns the tag
/// and reassembled payload. Enforces consistent tags and sequential chunk
/// indices across frames.
pub fn read_message(reader: &mut dyn Read) -> Result<(u32, Vec<u8>)> {
    let mut payload = Vec::new();
    let first = read_header(reader)?;
    if first.count == 0 {
        return Err(Error::Framing("zero chunk count".into()));
    }
    if first.idx != 0 {
        return Err(Error::Framing(format!(
            "chunk {} arrived, expected 0",
            first.idx
        )));
    }
    let (tag, count) = (first.tag, first.count);
    let mut expect_idx = 0u32;
    let mut header = first;
    loop {
        if header.tag != tag {
            return Err(Error::Framing(format!(
                "tag changed mid-message: {} != {tag}",
                header.tag
            )));
        }
        if header.count != count {
            return Err(Error::Framing("chunk count changed mid-message".into()));
        }
        if header.idx != expect_idx {
            return Err(Error::Framing(format!(
                "chunk {} arrived, expected {expect_idx}",
                header.idx
            )));
        }
        let mut chunk = vec![0u8; header.len as usize];
        reader.read_exact(&mut chunk)?;
        payload.extend_from_slice(&chunk);
        expect_idx += 1;
        if expect_idx == count {
            return Ok((tag, payload));
        }
        header = read_header(reader)?;
    }
}

/// Write every frame of one logical message.
pub fn write_message(
    writer: &mut dyn Write,
    tag: u32,
    payload: &[u8],
    buffer: u64,
) -> Result<u64> {
    let frames = frame_message(tag, payload, buffer);
    let mut total = 0u64;
    for f in &frames {
        writer.write_all(f)?;
        total += f.len() as u64;
    }
    writer.flush()?;
    Ok(total)
}
