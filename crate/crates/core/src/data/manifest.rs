//! JSONL manifests: one `{"utt_id", "speaker_id", "path", "duration_s"}` per line.
//!
//! Relative audio paths are resolved against the manifest's directory on
//! load, and written relative to it when possible.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = base_dir(path);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let mut e: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if e.utt_id.is_empty() || e.speaker_id.is_empty() {
            return Err(err("empty utt_id or speaker_id".into()));
        }
        if !(e.duration_s > 0.0 && e.duration_s.is_finite()) {
            return Err(err(format!("duration_s must be positive, got {}", e.duration_s)));
        }
        if let Some(first) = seen.insert(e.utt_id.clone(), lineno) {
            return Err(err(format!("duplicate utt_id {:?} (lines {first} and {lineno})", e.utt_id)));
        }
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        out.push(e);
    }
    Ok(out)
}

/// Loads and validates a manifest; every referenced audio file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_manifest(&text, path)?;
    let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    for (e, (i, _)) in entries.iter().zip(lines) {
        if !e.path.is_file() {
            return Err(Error::MissingAudio {
                manifest: path.to_path_buf(),
                line: i + 1,
                audio: e.path.clone(),
            });
        }
    }
    Ok(entries)
}

pub fn manifest_text(entries: &[ManifestEntry], path: &Path) -> Result<String> {
    let base = base_dir(path);
    let mut s = String::new();
    for e in entries {
        let mut e = e.clone();
        if let Ok(rel) = e.path.strip_prefix(base) {
            if !base.as_os_str().is_empty() {
                e.path = rel.to_path_buf();
            }
        }
        let line = serde_json::to_string(&e).map_err(|err| Error::InvalidArgument(err.to_string()))?;
        let _ = writeln!(s, "{line}");
    }
    Ok(s)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_atomic(path, manifest_text(entries, path)?.as_bytes())
}

/// Sorted distinct speaker ids.
pub fn speakers(entries: &[ManifestEntry]) -> Vec<String> {
    let mut s: Vec<String> = entries.iter().map(|e| e.speaker_id.clone()).collect();
    s.sort();
    s.dedup();
    s
}
