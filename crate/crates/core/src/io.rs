//! Persistence helpers: content hashes, deterministic float rounding and the
//! header-plus-binary format used for fields, potentials and operators.
//!
//! A binary dataset `stem` is two files: `stem.json` holds a JSON header and
//! `stem.bin` holds a flat little-endian array of complex doubles (re, im pairs).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::algebra::C64;
use crate::error::{Error, Result};

/// Hex SHA-256 of the compact JSON serialization of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory values serialize");
    hex_digest(&bytes)
}

/// Hex SHA-256 of raw bytes.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let s = format!("{:.*e}", (digits - 1).max(0) as usize, x);
    s.parse().expect("formatted float parses")
}

/// Recursively rounds every float inside a JSON value to `digits` significant digits.
pub fn round_json(value: &mut Value, digits: i32) {
    match value {
        Value::Number(n) => {
            if n.is_f64() {
                let r = round_sig(n.as_f64().expect("f64 number"), digits);
                if let Some(num) = serde_json::Number::from_f64(r) {
                    *n = num;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| round_json(v, digits)),
        Value::Object(map) => map.values_mut().for_each(|v| round_json(v, digits)),
        _ => {}
    }
}

/// Serializes `value` to pretty JSON with floats rounded to 12 significant digits.
pub fn to_rounded_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v, 12);
    Ok(serde_json::to_string_pretty(&v)?)
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `stem.json` and `stem.bin`.
pub fn write_dataset<H: Serialize>(stem: &Path, header: &H, data: &[C64]) -> Result<()> {
    fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(header)?)?;
    let mut out = BufWriter::new(fs::File::create(with_ext(stem, "bin"))?);
    for z in data {
        out.write_all(&z.re.to_le_bytes())?;
        out.write_all(&z.im.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<H: DeserializeOwned>(stem: &Path) -> Result<(H, Vec<C64>)> {
    let header: H = serde_json::from_str(&fs::read_to_string(with_ext(stem, "json"))?)?;
    let mut bytes = Vec::new();
    fs::File::open(with_ext(stem, "bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Validation(format!("binary payload length {} is not a multiple of 16", bytes.len())));
    }
    let data = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            C64::new(re, im)
        })
        .collect();
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        name: String,
        n: usize,
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("field");
        let data = vec![C64::new(1.5, -2.0), C64::new(f64::MIN_POSITIVE, 1e300)];
        let h = Header { name: "x".into(), n: 2 };
        write_dataset(&stem, &h, &data).unwrap();
        let (h2, d2): (Header, Vec<C64>) = read_dataset(&stem).unwrap();
        assert_eq!(h, h2);
        assert_eq!(data, d2);
        assert_eq!(fs::metadata(dir.path().join("field.bin")).unwrap().len(), 32);
    }

    #[test]
    fn rounding_to_twelve_digits() {
        assert_eq!(round_sig(1.234567890123456, 12), 1.23456789012);
        assert_eq!(round_sig(-9.87654321098765e-7, 12), -9.87654321099e-7);
        assert_eq!(round_sig(0.0, 12), 0.0);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = hash_json(&Header { name: "a".into(), n: 1 });
        assert_eq!(a, hash_json(&Header { name: "a".into(), n: 1 }));
        assert_ne!(a, hash_json(&Header { name: "a".into(), n: 2 }));
        assert_eq!(a.len(), 64);
    }
}
