//! PACK checkpoint container: a text header describing the run plus
//! named parameter tensors as embedded PATC blobs.
//!
//! Layout, all integers little-endian:
//!   magic "PACK", u16 version,
//!   u32 header byte length, header text ("key=value\n" lines, keys
//!     sorted),
//!   u32 parameter count, then per parameter in name order:
//!     u16 name length, name bytes (UTF-8),
//!     u64 blob length, PATC-encoded tensor.
//!
//! Writing canonicalizes ordering, so equal contents produce equal
//! bytes; reading rejects trailing bytes, duplicate keys, and blobs
//! whose length disagrees with their PATC payload.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{CoreError, Result};
use crate::tensorfile::{read_tensor_from, write_tensor_to, TensorData};

pub const MAGIC: [u8; 4] = *b"PACK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Run metadata; canonical form is sorted by key.
    pub header: Vec<(String, String)>,
    /// Parameter tensors; canonical form is sorted by name.
    pub params: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in &self.header {
            if k.is_empty() || k.contains('=') || k.contains('\n') {
                return Err(CoreError::invalid(
                    "checkpoint",
                    format!("header key {k:?} must be non-empty and free of '=' and newlines"),
                ));
            }
            if v.contains('\n') {
                return Err(CoreError::invalid(
                    "checkpoint",
                    format!("header value for {k:?} contains a newline"),
                ));
            }
        }
        let mut keys: Vec<&str> = self.header.iter().map(|(k, _)| k.as_str()).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::invalid("checkpoint", "duplicate header key"));
        }
        let mut names: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::invalid("checkpoint", "duplicate parameter name"));
        }
        for (n, _) in &self.params {
            if n.is_empty() || n.len() > u16::MAX as usize {
                return Err(CoreError::invalid(
                    "checkpoint",
                    format!("parameter name {n:?} has invalid length"),
                ));
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    cp.validate()?;
    let mut header = cp.header.clone();
    header.sort();
    let mut text = String::new();
    for (k, v) in &header {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    let mut order: Vec<usize> = (0..cp.params.len()).collect();
    order.sort_by(|a, b| cp.params[*a].0.cmp(&cp.params[*b].0));

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(cp.params.len() as u32).to_le_bytes());
    for i in order {
        let (name, value) = &cp.params[i];
        let mut blob: Vec<u8> = Vec::new();
        write_tensor_to(&mut blob, &TensorData::F32(value.clone()))?;
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        buf.extend_from_slice(&blob);
    }
    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CoreError::Format {
                offset: self.offset as u64,
                reason: format!(
                    "truncated checkpoint: needed {n} bytes for {what}, {} left",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"PACK\""),
        });
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Format {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let header_len = cur.u32("header length")? as usize;
    let header_start = cur.offset;
    let header_bytes = cur.take(header_len, "header")?;
    let text = std::str::from_utf8(header_bytes).map_err(|e| CoreError::Format {
        offset: (header_start + e.valid_up_to()) as u64,
        reason: "header is not valid UTF-8".into(),
    })?;
    let mut header = Vec::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(CoreError::Format {
                offset: header_start as u64,
                reason: format!("header line {line:?} has no '='"),
            });
        };
        header.push((k.to_string(), v.to_string()));
    }

    let n_params = cur.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let name_len = cur.u16("name length")? as usize;
        let name_start = cur.offset;
        let name_bytes = cur.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CoreError::Format {
                offset: name_start as u64,
                reason: format!("parameter {i} name is not valid UTF-8"),
            })?
            .to_string();
        let blob_len = cur.u64("blob length")? as usize;
        let blob_start = cur.offset;
        let blob = cur.take(blob_len, "tensor blob")?;
        let mut reader = blob;
        let tensor = read_tensor_from(&mut reader).map_err(|e| match e {
            CoreError::Format { offset, reason } => CoreError::Format {
                offset: blob_start as u64 + offset,
                reason: format!("in parameter {name:?}: {reason}"),
            },
            other => other,
        })?;
        if !reader.is_empty() {
            return Err(CoreError::Format {
                offset: (blob_start + blob_len - reader.len()) as u64,
                reason: format!(
                    "parameter {name:?} blob has {} trailing bytes",
                    reader.len()
                ),
            });
        }
        let TensorData::F32(value) = tensor else {
            return Err(CoreError::Format {
                offset: blob_start as u64,
                reason: format!(
                    "parameter {name:?} stored as {}, expected f32",
                    tensor.dtype_name()
                ),
            });
        };
        params.push((name, value));
    }
    if cur.offset != bytes.len() {
        return Err(CoreError::Format {
            offset: cur.offset as u64,
            reason: format!("{} trailing bytes after last parameter", bytes.len() - cur.offset),
        });
    }
    let cp = Checkpoint { header, params };
    cp.validate()?;
    Ok(cp)
}
