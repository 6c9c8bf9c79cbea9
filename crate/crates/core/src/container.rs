//! Self-describing array container used for checkpoints, feature dumps and
//! embedding files.
//!
//! Layout: the 4-byte magic `ACAT`, a little-endian `u64` header length, a
//! UTF-8 JSON header naming every array with its shape and element offset,
//! then the concatenated little-endian `f32` payload. Header keys are emitted
//! in a fixed order so identical contents always produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: BTreeMap<String, Value>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, Value>,
    arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate array name {name}")));
        }
        self.arrays.push(NamedArray {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                };
                offset += a.data.len();
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Container {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing ACAT magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(12..12usize.saturating_add(hlen))
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("invalid header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[12 + hlen..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut expected = 0;
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > floats.len() {
                return Err(bad(format!("array {} has an inconsistent offset", e.name)));
            }
            expected += n;
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: floats[e.offset..e.offset + n].to_vec(),
            });
        }
        if expected != floats.len() {
            return Err(bad(format!(
                "payload holds {} values but the header describes {expected}",
                floats.len()
            )));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
