use std::io::{self, Read, Write};

use super::message::MAX_PAYLOAD;

/// Writes a 4-byte little-endian length followed by the payload.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("frame of {} bytes exceeds protocol cap", payload.len()),
        ));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream at a frame
/// boundary; a partial frame at end of stream is `UnexpectedEof`, and a
/// length above the cap is `InvalidData`.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "stream closed inside frame length",
                ))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds protocol cap"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_is_four_bytes() {
        let mut out = Vec::new();
        write_frame(&mut out, &[7u8; 10]).unwrap();
        assert_eq!(out.len(), 14);
        assert_eq!(&out[..4], &10u32.to_le_bytes());
    }

    #[test]
    fn back_to_back_frames() {
        let mut out = Vec::new();
        write_frame(&mut out, b"one").unwrap();
        write_frame(&mut out, b"").unwrap();
        write_frame(&mut out, b"three").unwrap();
        let mut r = &out[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"one");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"three");
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn partial_trailing_frame_is_error() {
        let mut out = Vec::new();
        write_frame(&mut out, b"hello").unwrap();
        for cut in [2, 6] {
            let mut r = &out[..cut];
            assert_eq!(
                read_frame(&mut r).unwrap_err().kind(),
                io::ErrorKind::UnexpectedEof
            );
        }
    }

    #[test]
    fn oversize_length_rejected() {
        let bytes = ((MAX_PAYLOAD + 1) as u32).to_le_bytes();
        let mut r = &bytes[..];
        assert_eq!(
            read_frame(&mut r).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
    }
}
