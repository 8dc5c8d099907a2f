use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerifyOutcome {
    Ok,
    Mismatch { expected: String, actual: String },
    /// No checksum was published for the file.
    Skipped,
}

impl VerifyOutcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, VerifyOutcome::Mismatch { .. })
    }
}

pub fn md5_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn md5_hex(bytes: &[u8]) -> String {
    format!("{:x}", Md5::digest(bytes))
}

/// Compares the file's MD5 against `expected` (case-insensitive hex).
pub fn verify(path: &Path, expected: Option<&str>) -> io::Result<VerifyOutcome> {
    let Some(expected) = expected.map(str::trim).filter(|e| !e.is_empty()) else {
        return Ok(VerifyOutcome::Skipped);
    };
    let actual = md5_file(path)?;
    Ok(if actual.eq_ignore_ascii_case(expected) {
        VerifyOutcome::Ok
    } else {
        VerifyOutcome::Mismatch { expected: expected.to_ascii_lowercase(), actual }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"The quick brown fox jumps over the lazy dog"), "9e107d9d372bb6826bd81d3542a419d6");
    }

    #[test]
    fn verify_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        std::fs::write(&path, b"The quick brown fox jumps over the lazy dog").unwrap();
        assert_eq!(verify(&path, Some("9E107D9D372BB6826BD81D3542A419D6")).unwrap(), VerifyOutcome::Ok);
        assert!(verify(&path, Some("00000000000000000000000000000000")).unwrap().is_failure());
        assert_eq!(verify(&path, None).unwrap(), VerifyOutcome::Skipped);
        assert_eq!(verify(&path, Some("")).unwrap(), VerifyOutcome::Skipped);
    }
}
