//! Tensor frames on the wire.
//!
//! ```text
//! "SPRC" | ver u8 = 1 | flags u8 = 0 | name_len u16 | name | seq u64
//!        | dtype u8 | ndim u8 | dims u64 * ndim | payload_len u64 | payload
//! ```
//! All integers little-endian.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"SPRC";
pub const VERSION: u8 = 1;
pub const MAX_NAME_LEN: usize = 255;
/// Upper bound on a single payload accepted by the decoder.
pub const MAX_PAYLOAD: u64 = 1 << 32;
/// Tensor rank limit; keeps a damaged header from claiming a huge dims block.
pub const MAX_NDIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Int32,
    Int64,
    Float16,
    Bfloat16,
    Float32,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::Uint8,
        DType::Int32,
        DType::Int64,
        DType::Float16,
        DType::Bfloat16,
        DType::Float32,
    ];

    pub fn size(self) -> usize {
        match self {
            DType::Uint8 => 1,
            DType::Float16 | DType::Bfloat16 => 2,
            DType::Int32 | DType::Float32 => 4,
            DType::Int64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::Uint8 => 0,
            DType::Int32 => 1,
            DType::Int64 => 2,
            DType::Float16 => 3,
            DType::Bfloat16 => 4,
            DType::Float32 => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        DType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Uint8 => "uint8",
            DType::Int32 => "int32",
            DType::Int64 => "int64",
            DType::Float16 => "float16",
            DType::Bfloat16 => "bfloat16",
            DType::Float32 => "float32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dtype {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame corrupt: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("frame corrupt: unsupported version {0}")]
    BadVersion(u8),
    #[error("frame corrupt: unsupported flags {0:#04x}")]
    BadFlags(u8),
    #[error("frame corrupt: unknown dtype code {0}")]
    BadDtype(u8),
    #[error("frame corrupt: name is not UTF-8")]
    BadName,
    #[error("frame corrupt: payload of {actual} bytes, shape implies {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("frame corrupt: truncated, need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame corrupt: {0} trailing bytes")]
    Trailing(usize),
    #[error("frame corrupt: skipped {0} bytes before next magic")]
    Resync(usize),
    #[error("frame name is {0} bytes, limit 255")]
    NameTooLong(usize),
    #[error("frame name is empty")]
    EmptyName,
    #[error("frame has {0} dims, limit 32")]
    TooManyDims(usize),
    #[error("frame payload of {0} bytes exceeds the decoder limit")]
    PayloadTooLarge(u64),
}

impl FrameError {
    /// Errors describing damaged bytes, as opposed to an unencodable frame.
    pub fn is_corrupt(&self) -> bool {
        !matches!(self, FrameError::EmptyName)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub seq_no: u64,
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

fn expected_len(dtype: DType, shape: &[u64]) -> Option<u64> {
    element_count(shape)?.checked_mul(dtype.size() as u64)
}

impl Frame {
    /// Checks the shape/payload invariant.
    pub fn new(
        name: impl Into<String>,
        seq_no: u64,
        dtype: DType,
        shape: Vec<u64>,
        payload: Vec<u8>,
    ) -> Result<Self, FrameError> {
        let frame = Self {
            seq_no,
            name: name.into(),
            dtype,
            shape,
            payload,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// A flat `uint8` frame.
    pub fn bytes(name: impl Into<String>, payload: Vec<u8>) -> Self {
        let shape = vec![payload.len() as u64];
        Self {
            seq_no: 0,
            name: name.into(),
            dtype: DType::Uint8,
            shape,
            payload,
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.name.is_empty() {
            return Err(FrameError::EmptyName);
        }
        if self.name.len() > MAX_NAME_LEN {
            return Err(FrameError::NameTooLong(self.name.len()));
        }
        if self.shape.len() > MAX_NDIM {
            return Err(FrameError::TooManyDims(self.shape.len()));
        }
        let actual = self.payload.len() as u64;
        match expected_len(self.dtype, &self.shape) {
            Some(expected) if expected == actual => Ok(()),
            Some(expected) => Err(FrameError::LengthMismatch { expected, actual }),
            None => Err(FrameError::LengthMismatch {
                expected: u64::MAX,
                actual,
            }),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 1 + 2 + self.name.len() + 8 + 1 + 1 + 8 * self.shape.len() + 8 + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_into(frame, &mut out)?;
    Ok(out)
}

pub fn encode_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), FrameError> {
    frame.validate()?;
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&(frame.name.len() as u16).to_le_bytes());
    out.extend_from_slice(frame.name.as_bytes());
    out.extend_from_slice(&frame.seq_no.to_le_bytes());
    out.push(frame.dtype.code());
    out.push(frame.shape.len() as u8);
    for d in &frame.shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FrameError::Truncated {
                needed: self.pos.saturating_add(n),
                have: self.buf.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one frame from the front of `buf`, returning it with the number of
/// bytes used.
pub fn decode_prefix(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(FrameError::BadVersion(version));
    }
    let flags = c.u8()?;
    if flags != 0 {
        return Err(FrameError::BadFlags(flags));
    }
    let name_len = c.u16()? as usize;
    if name_len > MAX_NAME_LEN {
        return Err(FrameError::NameTooLong(name_len));
    }
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| FrameError::BadName)?
        .to_string();
    if name.is_empty() {
        return Err(FrameError::BadName);
    }
    let seq_no = c.u64()?;
    let code = c.u8()?;
    let dtype = DType::from_code(code).ok_or(FrameError::BadDtype(code))?;
    let ndim = c.u8()? as usize;
    if ndim > MAX_NDIM {
        return Err(FrameError::TooManyDims(ndim));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u64()?);
    }
    let payload_len = c.u64()?;
    let expected = expected_len(dtype, &shape);
    if expected != Some(payload_len) {
        return Err(FrameError::LengthMismatch {
            expected: expected.unwrap_or(u64::MAX),
            actual: payload_len,
        });
    }
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload_len));
    }
    let payload = c.take(payload_len as usize)?.to_vec();
    Ok((
        Frame {
            seq_no,
            name,
            dtype,
            shape,
            payload,
        },
        c.pos,
    ))
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_frame(buf: &[u8]) -> Result<Frame, FrameError> {
    let (frame, used) = decode_prefix(buf)?;
    if used != buf.len() {
        return Err(FrameError::Trailing(buf.len() - used));
    }
    Ok(frame)
}

/// Incremental decoder for a byte stream. On damage it reports an error and
/// skips forward to the next occurrence of the magic.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

fn find_magic(buf: &[u8], from: usize) -> Option<usize> {
    buf.get(from..)?
        .windows(4)
        .position(|w| w == MAGIC)
        .map(|p| p + from)
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame or error; `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<Frame, FrameError>> {
        if self.buf.is_empty() {
            return None;
        }
        if !self.buf.starts_with(&MAGIC) {
            // Keep a possible partial magic at the tail.
            let skip = match find_magic(&self.buf, 1) {
                Some(p) => p,
                None => {
                    let keep = (1..4)
                        .rev()
                        .find(|&k| k <= self.buf.len() && MAGIC.starts_with(&self.buf[self.buf.len() - k..]))
                        .unwrap_or(0);
                    let skip = self.buf.len() - keep;
                    if skip == 0 {
                        return None;
                    }
                    skip
                }
            };
            self.buf.drain(..skip);
            return Some(Err(FrameError::Resync(skip)));
        }
        match decode_prefix(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Some(Ok(frame))
            }
            Err(FrameError::Truncated { .. }) => None,
            Err(e) => {
                let skip = find_magic(&self.buf, 1).unwrap_or(self.buf.len());
                self.buf.drain(..skip);
                Some(Err(e))
            }
        }
    }

    /// Ends the stream; leftover bytes become a truncation error.
    pub fn finish(&mut self) -> Result<(), FrameError> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let have = self.buf.len();
        let needed = match decode_prefix(&self.buf) {
            Err(FrameError::Truncated { needed, .. }) => needed,
            _ => have + 1,
        };
        self.buf.clear();
        Err(FrameError::Truncated { needed, have })
    }
}
