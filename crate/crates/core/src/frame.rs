//! Wire framing.
//!
//! Every transfer on a channel is a frame: a fixed 10-byte header followed by
//! the payload.
//!
//! ```text
//! +---------+------+------------------------+-----------------+
//! | version | kind | payload_len (u64, BE)  | payload ...     |
//! |  1 byte |  1 B |        8 bytes         | payload_len B   |
//! +---------+------+------------------------+-----------------+
//! ```

use thiserror::Error;

/// Wire protocol version carried in every frame header.
pub const PROTOCOL_VERSION: u8 = 1;

/// Size of the fixed frame header.
pub const HEADER_LEN: usize = 10;

/// Largest payload a header may announce. Anything above this is treated as a
/// corrupt header.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 40;

/// Payload length of a `Hello` frame.
pub const HELLO_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Data = 0,
    Barrier = 1,
    Hello = 2,
    Close = 3,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Option<FrameKind> {
        match b {
            0 => Some(FrameKind::Data),
            1 => Some(FrameKind::Barrier),
            2 => Some(FrameKind::Hello),
            3 => Some(FrameKind::Close),
            _ => None,
        }
    }

    /// Payload length this kind requires, if fixed.
    fn fixed_len(self) -> Option<u64> {
        match self {
            FrameKind::Data => None,
            FrameKind::Barrier | FrameKind::Close => Some(0),
            FrameKind::Hello => Some(HELLO_LEN as u64),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("unsupported protocol version {0}")]
    VersionMismatch(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("payload length {0} exceeds the {MAX_PAYLOAD_LEN} byte cap")]
    LengthOverCap(u64),
    #[error("{kind:?} frame must carry {expected} payload bytes, header says {actual}")]
    InvalidLength {
        kind: FrameKind,
        expected: u64,
        actual: u64,
    },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} bytes follow the frame")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: FrameKind,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn new(kind: FrameKind, payload_len: u64) -> Result<FrameHeader, FrameError> {
        let header = FrameHeader { kind, payload_len };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<(), FrameError> {
        if self.payload_len > MAX_PAYLOAD_LEN {
            return Err(FrameError::LengthOverCap(self.payload_len));
        }
        match self.kind.fixed_len() {
            Some(expected) if expected != self.payload_len => Err(FrameError::InvalidLength {
                kind: self.kind,
                expected,
                actual: self.payload_len,
            }),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = PROTOCOL_VERSION;
        out[1] = self.kind as u8;
        out[2..].copy_from_slice(&self.payload_len.to_be_bytes());
        out
    }

    /// Parse a header. Checks run in wire order: version, kind, length cap,
    /// then the per-kind length rule.
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<FrameHeader, FrameError> {
        if bytes[0] != PROTOCOL_VERSION {
            return Err(FrameError::VersionMismatch(bytes[0]));
        }
        let kind = FrameKind::from_byte(bytes[1]).ok_or(FrameError::UnknownKind(bytes[1]))?;
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[2..]);
        FrameHeader::new(kind, u64::from_be_bytes(len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, payload: Vec<u8>) -> Result<Frame, FrameError> {
        FrameHeader::new(kind, payload.len() as u64)?;
        Ok(Frame { kind, payload })
    }

    pub fn data(payload: Vec<u8>) -> Frame {
        Frame {
            kind: FrameKind::Data,
            payload,
        }
    }

    pub fn barrier() -> Frame {
        Frame {
            kind: FrameKind::Barrier,
            payload: Vec::new(),
        }
    }

    pub fn close() -> Frame {
        Frame {
            kind: FrameKind::Close,
            payload: Vec::new(),
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.payload.len() as u64
    }
}

/// Encode a frame of `kind` carrying `payload`.
pub fn encode_frame(kind: FrameKind, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    let header = FrameHeader::new(kind, payload.len() as u64)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decode exactly one frame occupying the whole of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Decode the frame at the start of `bytes`, returning it with the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let head: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(FrameError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        })?;
    let header = FrameHeader::parse(head)?;
    let needed = HEADER_LEN as u64 + header.payload_len;
    if (bytes.len() as u64) < needed {
        return Err(FrameError::Truncated {
            needed,
            available: bytes.len() as u64,
        });
    }
    let end = needed as usize;
    Ok((
        Frame {
            kind: header.kind,
            payload: bytes[HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}
