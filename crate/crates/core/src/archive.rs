//! Versioned binary containers shared by the basis, dataset, checkpoint and
//! scan file formats.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON: {"payload_len", "payload_sha256", "body"}
//! payload      payload_len bytes, IEEE-754 f64 little-endian values
//! ```

use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ArchiveError {
    pub fn format(offset: usize, reason: impl Into<String>) -> Self {
        ArchiveError::Format { offset, reason: reason.into() }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    payload_len: u64,
    payload_sha256: String,
    body: H,
}

const PREFIX_LEN: usize = 8 + 4 + 8;

pub fn encode<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> Vec<u8> {
    let envelope = Envelope {
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(payload)),
        body: header,
    };
    let header = serde_json::to_vec_pretty(&envelope).expect("header serialises");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

/// Parses a container, returning the header body and the payload together
/// with the payload's byte offset in the file.
pub fn decode<'a, H: DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, Payload<'a>), ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::format(bytes.len(), "file shorter than magic"));
    }
    if &bytes[..8] != magic {
        return Err(ArchiveError::format(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(ArchiveError::format(bytes.len(), "truncated prefix"));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(ArchiveError::Version { found, supported: version });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ArchiveError::format(PREFIX_LEN, format!("header of {header_len} bytes runs past end of file")))?;
    let envelope: Envelope<H> = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| ArchiveError::format(PREFIX_LEN, format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    if payload.len() as u64 != envelope.payload_len {
        return Err(ArchiveError::format(
            header_end + payload.len().min(envelope.payload_len as usize),
            format!("payload is {} bytes, header declares {}", payload.len(), envelope.payload_len),
        ));
    }
    if hex::encode(Sha256::digest(payload)) != envelope.payload_sha256 {
        return Err(ArchiveError::format(header_end, "payload checksum mismatch"));
    }
    Ok((envelope.body, Payload { bytes: payload, base: header_end, pos: 0 }))
}

pub fn write_file<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    payload: &[u8],
) -> Result<(), ArchiveError> {
    fs::write(path, encode(magic, version, header, payload))?;
    Ok(())
}

/// Sequential little-endian reader over a container payload.
#[derive(Debug)]
pub struct Payload<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
}

impl Payload<'_> {
    /// Absolute file offset of the next unread byte.
    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn f64(&mut self) -> Result<f64, ArchiveError> {
        let end = self.pos + 8;
        if end > self.bytes.len() {
            return Err(ArchiveError::format(self.offset(), "payload ends mid-value"));
        }
        let v = f64::from_le_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ArchiveError> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn complex(&mut self, n: usize) -> Result<Vec<Complex64>, ArchiveError> {
        (0..n).map(|_| Ok(Complex64::new(self.f64()?, self.f64()?))).collect()
    }

    pub fn finish(&self) -> Result<(), ArchiveError> {
        if self.remaining() != 0 {
            return Err(ArchiveError::format(self.offset(), format!("{} trailing payload bytes", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn with_capacity(values: usize) -> Self {
        Self { buf: Vec::with_capacity(values * 8) }
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn complex(&mut self, vs: &[Complex64]) {
        for v in vs {
            self.f64(v.re);
            self.f64(v.im);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFILE";

    fn sample() -> Vec<u8> {
        let mut w = PayloadWriter::default();
        w.f64s(&[1.5, -0.0, f64::MIN_POSITIVE]);
        encode(MAGIC, 1, &serde_json::json!({"name": "x", "v": 0.1}), &w.into_bytes())
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let (h, mut p): (serde_json::Value, _) = decode(&bytes, MAGIC, 1).unwrap();
        assert_eq!(h["name"], "x");
        assert_eq!(p.f64s(3).unwrap(), vec![1.5, -0.0, f64::MIN_POSITIVE]);
        p.finish().unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 3];
        match decode::<serde_json::Value>(cut, MAGIC, 1) {
            Err(ArchiveError::Format { offset, .. }) => assert!(offset > PREFIX_LEN),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let bytes = sample();
        assert!(matches!(decode::<serde_json::Value>(&bytes, MAGIC, 2), Err(ArchiveError::Version { found: 1, .. })));
        assert!(matches!(
            decode::<serde_json::Value>(&bytes, b"OTHERMAG", 1),
            Err(ArchiveError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut bytes = sample();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode::<serde_json::Value>(&bytes, MAGIC, 1), Err(ArchiveError::Format { .. })));
    }
}
