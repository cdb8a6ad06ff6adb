//! Versioned model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CBRLCKPT"
//! version  u32
//! kind     u32 length + UTF-8 bytes
//! payload  u64 length + JSON bytes
//! digest   32 bytes, SHA-256 of the payload
//! ```
//!
//! The payload is the model serialized with round-trip float formatting, so
//! loading restores every parameter bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"CBRLCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Serialize>(kind: &str, value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)?;
    let mut out = Vec::with_capacity(payload.len() + kind.len() + 56);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Kind tag of an encoded checkpoint.
pub fn peek_kind(bytes: &[u8]) -> Result<String> {
    let mut r = Reader { bytes };
    header(&mut r)
}

fn header(r: &mut Reader) -> Result<String> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("kind is not UTF-8".into()))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<T> {
    let mut r = Reader { bytes };
    let found = header(&mut r)?;
    if found != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {found}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("payload too large".into()))?;
    let payload = r.take(len)?;
    let digest = r.take(32)?;
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }
    Ok(serde_json::from_slice(payload)?)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    write_atomic(path, &encode(kind, value)?)
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Matrix;

    #[test]
    fn round_trip_is_exact() {
        let m = Matrix::from_shape_vec((1, 3), vec![0.1, -1.0 / 3.0, 1e-300]).unwrap();
        let bytes = encode("matrix", &m).unwrap();
        assert_eq!(peek_kind(&bytes).unwrap(), "matrix");
        let back: Matrix = decode(&bytes, "matrix").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_wrong_kind_and_corruption() {
        let mut bytes = encode("a", &vec![1.0, 2.0]).unwrap();
        assert!(decode::<Vec<f64>>(&bytes, "b").is_err());
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(decode::<Vec<f64>>(&bytes, "a"), Err(Error::Checkpoint(_))));
        assert!(decode::<Vec<f64>>(b"garbage", "a").is_err());
    }
}
