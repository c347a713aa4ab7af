//! Binary message protocol between edges and the cloud.
//!
//! Every payload starts with `"CEMA"`, the protocol version byte and a
//! message-type byte. Integers and reals are little-endian; vectors are a
//! `u32` length followed by their elements. Payloads travel in frames with a
//! `u32` little-endian length prefix.

mod frame;
mod message;

pub use frame::{read_frame, write_frame};
pub use message::{
    decode, encode, param_update_len, DecodeError, EncodeError, Message, MessageType, WireSample,
    HEADER_LEN, MAGIC, MAX_PAYLOAD, PROTOCOL_VERSION,
};

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Encodes and frames a message onto a stream. Returns the payload size.
pub fn send<W: Write + ?Sized>(w: &mut W, msg: &Message) -> Result<usize> {
    let payload = encode(msg)?;
    write_frame(w, &payload)?;
    Ok(payload.len())
}

/// Reads and decodes one message; `None` on clean end of stream.
pub fn recv<R: Read + ?Sized>(r: &mut R) -> Result<Option<Message>> {
    match read_frame(r) {
        Ok(Some(p)) => Ok(Some(decode(&p)?)),
        Ok(None) => Ok(None),
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            Err(Error::Protocol(e.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}
