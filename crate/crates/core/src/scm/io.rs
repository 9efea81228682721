use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FullSample, ScmError, ScmSpec};

pub const DATASET_VERSION: u32 = 1;

/// Sidecar written next to every dataset file as `<file>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub version: u32,
    pub spec: ScmSpec,
    pub seed: u64,
    pub n: usize,
    pub sha256: String,
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn encode(samples: &[FullSample]) -> Result<Vec<u8>, ScmError> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// SHA-256 of the JSONL encoding, hex.
pub fn dataset_hash(samples: &[FullSample]) -> Result<String, ScmError> {
    Ok(hex::encode(Sha256::digest(encode(samples)?)))
}

/// Writes one JSON object per line plus the metadata sidecar.
pub fn write_dataset(
    path: &Path,
    samples: &[FullSample],
    spec: &ScmSpec,
    seed: u64,
) -> Result<DatasetMetadata, ScmError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = encode(samples)?;
    let meta = DatasetMetadata {
        version: DATASET_VERSION,
        spec: spec.clone(),
        seed,
        n: samples.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    fs::write(metadata_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Reads a JSONL dataset. Ground-truth fields may be absent. Blank lines
/// are skipped; malformed lines are reported with their 1-based number.
pub fn read_dataset(path: &Path) -> Result<Vec<FullSample>, ScmError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: FullSample = serde_json::from_str(&line).map_err(|e| ScmError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn read_metadata(path: &Path) -> Result<DatasetMetadata, ScmError> {
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(metadata_path(path))?)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(ScmError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}
