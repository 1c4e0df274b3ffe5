//! Length-prefixed framing: 4-byte big-endian length followed by the body.

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::NetError;

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub fn encode_frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn decode_frame(buf: &[u8]) -> Result<&[u8], NetError> {
    if buf.len() < 4 {
        return Err(NetError::Frame("short header".into()));
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME {
        return Err(NetError::Frame(format!("frame of {len} bytes exceeds limit")));
    }
    if buf.len() != len + 4 {
        return Err(NetError::Frame(format!("length prefix {len} but {} body bytes", buf.len() - 4)));
    }
    Ok(&buf[4..])
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, body: &[u8]) -> Result<(), NetError> {
    w.write_all(&encode_frame(body)).await.map_err(|e| NetError::Io(e.to_string()))?;
    w.flush().await.map_err(|e| NetError::Io(e.to_string()))
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Vec<u8>>, NetError> {
    let mut header = [0u8; 4];
    match r.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(NetError::Io(e.to_string())),
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(NetError::Frame(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await.map_err(|e| NetError::Io(e.to_string()))?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_big_endian() {
        let f = encode_frame(b"{}");
        assert_eq!(&f[..4], &[0, 0, 0, 2]);
        assert!(decode_frame(&f[..5]).is_err());
        assert!(decode_frame(&[0, 0]).is_err());
    }

    #[tokio::test]
    async fn stream_roundtrip_and_clean_eof() {
        let (mut a, mut b) = tokio::io::duplex(64);
        write_frame(&mut a, b"hello").await.unwrap();
        drop(a);
        assert_eq!(read_frame(&mut b).await.unwrap().unwrap(), b"hello");
        assert!(read_frame(&mut b).await.unwrap().is_none());
    }

    proptest! {
        #[test]
        fn roundtrip(body in proptest::collection::vec(any::<u8>(), 0..512)) {
            let f = encode_frame(&body);
            prop_assert_eq!(decode_frame(&f).unwrap(), &body[..]);
        }
    }
}
