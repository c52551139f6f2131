//! Named-tensor container used for model parameters and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SLSRTNSR"            magic
//! u32                    format version (1)
//! u64                    header length in bytes
//! <header JSON>          {"meta": {...}, "payload_sha256": "...",
//!                         "tensors": [{"name","dtype":"f64","shape","offset","nbytes"}]}
//! <payload>              concatenated tensor data, little-endian
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SLSRTNSR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    payload_sha256: String,
    tensors: Vec<Entry>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode(meta: &serde_json::Value, tensors: &[Tensor]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|t| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let offset = payload.len();
        let start = payload.len();
        payload.resize(start + t.len() * 8, 0);
        LittleEndian::write_f64_into(&t.data, &mut payload[start..]);
        entries.push(Entry {
            name: t.name.clone(),
            dtype: "f64".into(),
            shape: t.shape.clone(),
            offset: offset as u64,
            nbytes: (t.len() * 8) as u64,
        });
    }
    let header = Header {
        meta: meta.clone(),
        payload_sha256: sha256_hex(&payload),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("archive header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("tensor archive", detail)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Tensor>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = LittleEndian::read_u32(&bytes[8..12]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = LittleEndian::read_u64(&bytes[12..20]) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[hend..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let len: usize = e.shape.iter().product();
        let (off, nb) = (e.offset as usize, e.nbytes as usize);
        if nb != len * 8 || off.checked_add(nb).is_none_or(|end| end > payload.len()) {
            return Err(bad(format!("tensor {} has inconsistent extent", e.name)));
        }
        let mut data = vec![0.0; len];
        LittleEndian::read_f64_into(&payload[off..off + nb], &mut data);
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok((header.meta, tensors))
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(meta, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
