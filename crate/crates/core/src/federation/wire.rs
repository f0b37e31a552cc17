//! Length-prefixed binary frames exchanged between server and clients.
//!
//! A frame is `length u32 | type u8 | payload`, little-endian, where `length`
//! counts payload bytes only.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::label::CLASS_COUNT;
use crate::neural::ConfusionMatrix;

pub const PROTOCOL_VERSION: u16 = 1;
/// Upper bound on a payload; larger length prefixes are treated as malformed.
pub const MAX_PAYLOAD: u32 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    Config = 0x02,
    Global = 0x03,
    Local = 0x04,
    Metrics = 0x05,
    Done = 0x06,
    Error = 0x07,
}

/// Wire type of one payload field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    U16,
    U32,
    U64,
    F64,
    /// `count u64` followed by `count × f64` model parameters.
    Params,
    /// 25 × u64, row-major by true class.
    Confusion,
    Utf8,
}

impl MessageType {
    pub const ALL: [MessageType; 7] = [
        MessageType::Hello,
        MessageType::Config,
        MessageType::Global,
        MessageType::Local,
        MessageType::Metrics,
        MessageType::Done,
        MessageType::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or_else(|| Error::protocol(format!("unknown frame type {code:#04x}")))
    }

    /// Payload layout, in order.
    pub fn fields(self) -> &'static [(&'static str, FieldKind)] {
        use FieldKind::*;
        match self {
            MessageType::Hello => &[("client_id", U32), ("arch_hash", U64), ("protocol_version", U16)],
            MessageType::Config => &[("rounds", U32), ("local_epochs", U32), ("learning_rate", F64), ("seed", U64)],
            MessageType::Global => &[("round", U32), ("params", Params)],
            MessageType::Local => &[
                ("round", U32),
                ("client_id", U32),
                ("params", Params),
                ("train_loss", F64),
                ("val_loss", F64),
            ],
            MessageType::Metrics => &[
                ("round", U32),
                ("client_id", U32),
                ("test_accuracy", F64),
                ("confusion", Confusion),
            ],
            MessageType::Done => &[("params", Params)],
            MessageType::Error => &[("code", U16), ("message", Utf8)],
        }
    }
}

/// Codes carried by [`Message::Error`].
pub mod error_code {
    pub const DUPLICATE_CLIENT: u16 = 1;
    pub const ARCH_MISMATCH: u16 = 2;
    pub const VERSION_MISMATCH: u16 = 3;
    pub const STALE_ROUND: u16 = 4;
    pub const TIMEOUT: u16 = 5;
    pub const MALFORMED: u16 = 6;
    pub const CLIENT_FAILURE: u16 = 7;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, arch_hash: u64, protocol_version: u16 },
    Config { rounds: u32, local_epochs: u32, learning_rate: f64, seed: u64 },
    Global { round: u32, params: Vec<f64> },
    Local { round: u32, client_id: u32, params: Vec<f64>, train_loss: f64, val_loss: f64 },
    Metrics { round: u32, client_id: u32, test_accuracy: f64, confusion: ConfusionMatrix },
    Done { params: Vec<f64> },
    Error { code: u16, message: String },
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::Config { .. } => MessageType::Config,
            Message::Global { .. } => MessageType::Global,
            Message::Local { .. } => MessageType::Local,
            Message::Metrics { .. } => MessageType::Metrics,
            Message::Done { .. } => MessageType::Done,
            Message::Error { .. } => MessageType::Error,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let params = |b: &mut Vec<u8>, p: &[f64]| {
            b.extend_from_slice(&(p.len() as u64).to_le_bytes());
            b.reserve(8 * p.len());
            for v in p {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        match self {
            Message::Hello { client_id, arch_hash, protocol_version } => {
                b.extend_from_slice(&client_id.to_le_bytes());
                b.extend_from_slice(&arch_hash.to_le_bytes());
                b.extend_from_slice(&protocol_version.to_le_bytes());
            }
            Message::Config { rounds, local_epochs, learning_rate, seed } => {
                b.extend_from_slice(&rounds.to_le_bytes());
                b.extend_from_slice(&local_epochs.to_le_bytes());
                b.extend_from_slice(&learning_rate.to_le_bytes());
                b.extend_from_slice(&seed.to_le_bytes());
            }
            Message::Global { round, params: p } => {
                b.extend_from_slice(&round.to_le_bytes());
                params(&mut b, p);
            }
            Message::Local { round, client_id, params: p, train_loss, val_loss } => {
                b.extend_from_slice(&round.to_le_bytes());
                b.extend_from_slice(&client_id.to_le_bytes());
                params(&mut b, p);
                b.extend_from_slice(&train_loss.to_le_bytes());
                b.extend_from_slice(&val_loss.to_le_bytes());
            }
            Message::Metrics { round, client_id, test_accuracy, confusion } => {
                b.extend_from_slice(&round.to_le_bytes());
                b.extend_from_slice(&client_id.to_le_bytes());
                b.extend_from_slice(&test_accuracy.to_le_bytes());
                for v in confusion.iter().flatten() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Done { params: p } => params(&mut b, p),
            Message::Error { code, message } => {
                b.extend_from_slice(&code.to_le_bytes());
                b.extend_from_slice(message.as_bytes());
            }
        }
        b
    }

    /// The complete frame, header included.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut frame = Vec::with_capacity(5 + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.push(self.message_type().code());
        frame.extend_from_slice(&payload);
        frame
    }

    pub fn decode(code: u8, payload: &[u8]) -> Result<Message> {
        let ty = MessageType::from_code(code)?;
        let mut c = Cursor { buf: payload, pos: 0, ty };
        let msg = match ty {
            MessageType::Hello => Message::Hello {
                client_id: c.u32()?,
                arch_hash: c.u64()?,
                protocol_version: c.u16()?,
            },
            MessageType::Config => Message::Config {
                rounds: c.u32()?,
                local_epochs: c.u32()?,
                learning_rate: c.f64()?,
                seed: c.u64()?,
            },
            MessageType::Global => Message::Global { round: c.u32()?, params: c.params()? },
            MessageType::Local => Message::Local {
                round: c.u32()?,
                client_id: c.u32()?,
                params: c.params()?,
                train_loss: c.f64()?,
                val_loss: c.f64()?,
            },
            MessageType::Metrics => {
                let round = c.u32()?;
                let client_id = c.u32()?;
                let test_accuracy = c.f64()?;
                let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
                for v in confusion.iter_mut().flatten() {
                    *v = c.u64()?;
                }
                Message::Metrics { round, client_id, test_accuracy, confusion }
            }
            MessageType::Done => Message::Done { params: c.params()? },
            MessageType::Error => {
                let code = c.u16()?;
                let message = String::from_utf8(c.rest().to_vec())
                    .map_err(|_| Error::protocol("ERROR frame message is not UTF-8"))?;
                Message::Error { code, message }
            }
        };
        if c.pos != payload.len() {
            return Err(Error::protocol(format!(
                "{ty:?} frame has {} trailing bytes",
                payload.len() - c.pos
            )));
        }
        Ok(msg)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    ty: MessageType,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::protocol(format!("{:?} frame payload too short", self.ty)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn params(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()?;
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= (self.buf.len() - self.pos) as u64)
            .ok_or_else(|| Error::protocol(format!("{:?} frame declares {n} parameters", self.ty)))?;
        Ok(self
            .take(bytes as usize)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn rest(&mut self) -> &[u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

/// Writes one frame and returns its size in bytes.
pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<usize> {
    let frame = msg.encode();
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Reads one frame; returns the message and the frame size in bytes.
pub fn read_message(r: &mut impl Read) -> Result<(Message, usize)> {
    let (code, payload) = read_frame(r)?;
    Ok((Message::decode(code, &payload)?, 5 + payload.len()))
}

/// Reads one raw frame without interpreting its payload.
pub fn read_frame(r: &mut impl Read) -> Result<(u8, Vec<u8>)> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(io_to_protocol)?;
    let len = u32::from_le_bytes(head[..4].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(format!("frame length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(io_to_protocol)?;
    Ok((head[4], payload))
}

fn io_to_protocol(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout("no frame within the read timeout".into()),
        io::ErrorKind::UnexpectedEof => Error::protocol("connection closed mid-session"),
        _ => Error::Io(e),
    }
}
