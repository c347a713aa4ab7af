use thiserror::Error;

use crate::nn::{AffineLayer, AffineParamSet};

pub const MAGIC: [u8; 4] = *b"CEMA";
pub const PROTOCOL_VERSION: u8 = 1;
/// Upper bound on a payload, in bytes.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
/// Magic, protocol version, message type.
pub const HEADER_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    ClientHello = 1,
    ServerHello = 2,
    SampleBatch = 3,
    ParamUpdate = 4,
    Ack = 5,
}

impl MessageType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::ClientHello,
            2 => Self::ServerHello,
            3 => Self::SampleBatch,
            4 => Self::ParamUpdate,
            5 => Self::Ack,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireSample {
    pub sample_id: u64,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ClientHello {
        edge_id: u32,
        spec_hash: [u8; 8],
    },
    ServerHello {
        accepted: bool,
        current_version: u64,
    },
    SampleBatch {
        seq: u64,
        samples: Vec<WireSample>,
    },
    ParamUpdate(AffineParamSet),
    Ack {
        seq: u64,
    },
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::ClientHello { .. } => MessageType::ClientHello,
            Message::ServerHello { .. } => MessageType::ServerHello,
            Message::SampleBatch { .. } => MessageType::SampleBatch,
            Message::ParamUpdate(_) => MessageType::ParamUpdate,
            Message::Ack { .. } => MessageType::Ack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte protocol cap")]
    Oversize(usize),
    #[error("non-finite real in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}, expected \"CEMA\"")]
    BadMagic([u8; 4]),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),
    #[error("invalid flag byte {0} in {1}")]
    InvalidFlag(u8, &'static str),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

/// Exact encoded size of a parameter update:
/// header, version, layer count, and per layer the index, both vector
/// lengths and the reals.
pub fn param_update_len(widths: &[usize]) -> usize {
    HEADER_LEN + 4 + 8 + widths.iter().map(|w| 2 + 4 + 4 + 8 * w).sum::<usize>()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<(), EncodeError> {
        let n32 = u32::try_from(n).map_err(|_| EncodeError::Oversize(n))?;
        self.u32(n32);
        Ok(())
    }
    fn reals(&mut self, v: &[f32], field: &'static str) -> Result<(), EncodeError> {
        self.len(v.len())?;
        for &x in v {
            if !x.is_finite() {
                return Err(EncodeError::NonFinite(field));
            }
            // -0.0 and +0.0 compare equal, so they must encode equally.
            let x = if x == 0.0 { 0.0f32 } else { x };
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        Ok(())
    }
    fn check_cap(&self) -> Result<(), EncodeError> {
        if self.buf.len() > MAX_PAYLOAD {
            Err(EncodeError::Oversize(self.buf.len()))
        } else {
            Ok(())
        }
    }
}

/// Deterministic encoding. Equal messages give equal bytes.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.u8(PROTOCOL_VERSION);
    w.u8(msg.message_type() as u8);
    match msg {
        Message::ClientHello { edge_id, spec_hash } => {
            w.u32(*edge_id);
            w.buf.extend_from_slice(spec_hash);
        }
        Message::ServerHello {
            accepted,
            current_version,
        } => {
            w.u8(u8::from(*accepted));
            w.u64(*current_version);
        }
        Message::SampleBatch { seq, samples } => {
            w.u64(*seq);
            w.len(samples.len())?;
            for s in samples {
                w.u64(s.sample_id);
                w.reals(&s.features, "sample features")?;
                w.check_cap()?;
            }
        }
        Message::ParamUpdate(set) => {
            w.u64(set.version);
            w.len(set.layers.len())?;
            for l in &set.layers {
                w.u16(l.index);
                w.reals(&l.gamma, "gamma")?;
                w.reals(&l.beta, "beta")?;
                w.check_cap()?;
            }
        }
        Message::Ack { seq } => w.u64(*seq),
    }
    w.check_cap()?;
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated(field));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }
    fn u32(&mut self, field: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn reals(&mut self, field: &'static str) -> Result<Vec<f32>, DecodeError> {
        let n = self.u32(field)? as usize;
        if n > self.buf.len() / 4 {
            return Err(DecodeError::Truncated(field));
        }
        let bytes = self.take(4 * n, field)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    /// Element count for a list whose elements take at least `min_elem` bytes.
    fn count(&mut self, min_elem: usize, field: &'static str) -> Result<usize, DecodeError> {
        let n = self.u32(field)? as usize;
        if n > self.buf.len() / min_elem {
            return Err(DecodeError::Truncated(field));
        }
        Ok(n)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = r.u8("protocol version")?;
    if version != PROTOCOL_VERSION {
        return Err(DecodeError::UnknownVersion(version));
    }
    let ty = r.u8("message type")?;
    let ty = MessageType::from_byte(ty).ok_or(DecodeError::UnknownType(ty))?;
    let msg = match ty {
        MessageType::ClientHello => Message::ClientHello {
            edge_id: r.u32("edge_id")?,
            spec_hash: r.take(8, "spec_hash")?.try_into().unwrap(),
        },
        MessageType::ServerHello => {
            let flag = r.u8("accepted")?;
            let accepted = match flag {
                0 => false,
                1 => true,
                other => return Err(DecodeError::InvalidFlag(other, "accepted")),
            };
            Message::ServerHello {
                accepted,
                current_version: r.u64("current_version")?,
            }
        }
        MessageType::SampleBatch => {
            let seq = r.u64("seq")?;
            let n = r.count(12, "sample count")?;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let sample_id = r.u64("sample_id")?;
                let features = r.reals("features")?;
                samples.push(WireSample {
                    sample_id,
                    features,
                });
            }
            Message::SampleBatch { seq, samples }
        }
        MessageType::ParamUpdate => {
            let version = r.u64("version")?;
            let n = r.count(10, "layer count")?;
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                let index = r.u16("layer_idx")?;
                let gamma = r.reals("gamma")?;
                let beta = r.reals("beta")?;
                layers.push(AffineLayer { index, gamma, beta });
            }
            Message::ParamUpdate(AffineParamSet { version, layers })
        }
        MessageType::Ack => Message::Ack { seq: r.u64("seq")? },
    };
    if !r.buf.is_empty() {
        return Err(DecodeError::TrailingBytes(r.buf.len()));
    }
    Ok(msg)
}
