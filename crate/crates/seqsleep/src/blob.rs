//! Flat little-endian `f64` blobs, SHA-256 digests and JSON helpers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Writes `values` and returns the digest of the written bytes.
pub fn write_f64(path: &Path, values: &[f64]) -> Result<String> {
    let bytes = encode_f64(values);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a blob, checking its length and digest.
pub fn read_f64(path: &Path, expected_len: usize, expected_sha: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).at(path)?;
    let digest = sha256_hex(&bytes);
    if digest != expected_sha {
        return Err(Error::Corrupt(
            path.into(),
            format!("digest {digest} does not match {expected_sha}"),
        ));
    }
    match decode_f64(&bytes) {
        Some(v) if v.len() == expected_len => Ok(v),
        _ => Err(Error::Corrupt(
            path.into(),
            format!("{} bytes do not hold {expected_len} values", bytes.len()),
        )),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bitwise() {
        let v = [0.0, -0.0, 1.5, f64::MIN_POSITIVE, -1e300, 1.0 / 3.0];
        let back = decode_f64(&encode_f64(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_f64(&[0; 7]).is_none());
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn corrupt_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let sha = write_f64(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(read_f64(&p, 2, &sha).unwrap(), vec![1.0, 2.0]);
        fs::write(&p, encode_f64(&[1.0, 3.0])).unwrap();
        let err = read_f64(&p, 2, &sha).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
