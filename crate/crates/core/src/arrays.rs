//! Named-array container used for bag files and checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! UMTL-ARRAYS 1
//! meta <key> <value>
//! array <name> <rows> <cols>
//! end
//! ```
//!
//! followed by the arrays' `f64` values, little-endian, in header order.
//! Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, UmtlError};
use crate::tensor::Mat;

const MAGIC: &str = "UMTL-ARRAYS 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Mat)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let v = value.to_string();
        assert!(
            !key.contains(char::is_whitespace) && !v.contains('\n'),
            "meta key/value must be single-line"
        );
        self.meta.insert(key.to_string(), v);
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) {
        let name = name.into();
        assert!(!name.contains(char::is_whitespace), "array names have no spaces");
        self.arrays.push((name, m));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, m) in &self.arrays {
            header.push_str(&format!("array {name} {} {}\n", m.rows, m.cols));
        }
        header.push_str("end\n");
        let payload: usize = self.arrays.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(header.len() + payload);
        out.extend_from_slice(header.as_bytes());
        for (_, m) in &self.arrays {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| UmtlError::Malformed {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Option<String> {
            let rest = &bytes[*pos..];
            let nl = rest.iter().position(|&b| b == b'\n')?;
            let line = String::from_utf8(rest[..nl].to_vec()).ok()?;
            *pos += nl + 1;
            Some(line)
        };
        if next_line(&mut pos).as_deref() != Some(MAGIC) {
            return Err(bad("bad magic"));
        }
        let mut file = ArrayFile::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line(&mut pos).ok_or_else(|| bad("truncated header"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    file.meta.insert(k.to_string(), v.to_string());
                }
                (Some("array"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad("array line"));
                    }
                    let rows = f[1].parse().map_err(|_| bad("array rows"))?;
                    let cols = f[2].parse().map_err(|_| bad("array cols"))?;
                    shapes.push((f[0].to_string(), rows, cols));
                }
                _ => return Err(bad("unknown header line")),
            }
        }
        for (name, rows, cols) in shapes {
            let n: usize = rows * cols;
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos = end;
            file.arrays.push((name, Mat::from_vec(rows, cols, data)));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(UmtlError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| UmtlError::io(path, e))
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| UmtlError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| UmtlError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| UmtlError::io(path, e))
}
