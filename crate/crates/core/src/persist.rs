//! Atomic file writes and the versioned, checksummed checkpoint format.
//!
//! A checkpoint is three parts: a magic line naming the format version, a
//! line with the SHA-256 of the payload, and the JSON payload itself.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "INFOCORE-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_checkpoint<T: Serialize>(payload: &T) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(payload)?;
    let mut out = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\nsha256 {}\n", sha256_hex(&body)).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_checkpoint<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let mut parts = bytes.splitn(3, |&c| c == b'\n');
    let magic = std::str::from_utf8(parts.next().unwrap_or_default())
        .map_err(|_| Error::Corrupted("header is not UTF-8".into()))?;
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .ok_or_else(|| Error::Corrupted("missing checkpoint header".into()))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version { expected: format!("v{CHECKPOINT_VERSION}"), found: format!("v{version}") });
    }
    let digest_line = parts.next().and_then(|l| std::str::from_utf8(l).ok()).unwrap_or_default();
    let digest = digest_line
        .strip_prefix("sha256 ")
        .ok_or_else(|| Error::Corrupted("missing checksum line".into()))?;
    let body = parts.next().ok_or_else(|| Error::Corrupted("missing payload".into()))?;
    if sha256_hex(body) != digest.trim() {
        return Err(Error::Corrupted("checksum mismatch".into()));
    }
    serde_json::from_slice(body).map_err(|e| Error::Corrupted(format!("payload: {e}")))
}

pub fn save_checkpoint<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    write_atomic(path, &encode_checkpoint(payload)?)
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_floats_exactly() {
        let payload = vec![0.1f64, 1.0 / 3.0, -2.5e-300, 7.0];
        let back: Vec<f64> = decode_checkpoint(&encode_checkpoint(&payload).unwrap()).unwrap();
        assert_eq!(back, payload);
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let mut bytes = encode_checkpoint(&vec![1.0f64, 2.0]).unwrap();
        let last = bytes.len() - 2;
        bytes[last] = b'5';
        let err = decode_checkpoint::<Vec<f64>>(&bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupted(_)), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let bytes = encode_checkpoint(&1u8).unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen("v1", "v2", 1);
        let err = decode_checkpoint::<u8>(text.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Version { found, .. } if found == "v2"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
