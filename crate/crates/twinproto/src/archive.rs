//! On-disk dataset archives.
//!
//! An archive is a directory holding `manifest.json` and `samples.bin`. The
//! manifest lists every window in blob order:
//!
//! ```json
//! {"format": "twinproto-archive/1", "speed_rpm": 2700, "sample_rate_hz": 5120.0,
//!  "blob": "samples.bin",
//!  "samples": [{"id": 0, "label": "N", "speed": 2700, "domain": "virtual", "offset": 0, "length": 1024}, ...]}
//! ```
//!
//! `offset` counts f64 values from the start of the blob and `length` is the
//! number of values per phase. Each window occupies `3 * length` consecutive
//! little-endian f64 values, phase-major (all of phase A, then B, then C).
//! Virtual windows form the source pool and physical windows the target pool.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twinproto_core::tensor::Tensor;
use twinproto_core::twinsim::{DatasetArchive, Domain, HealthState, SignalSample};

use crate::error::{io, Error, Result};

pub const FORMAT: &str = "twinproto-archive/1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "samples.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub speed_rpm: u32,
    pub sample_rate_hz: f64,
    pub blob: String,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub label: HealthState,
    pub speed: u32,
    pub domain: Domain,
    pub offset: u64,
    pub length: usize,
}

/// Manifest and blob bytes for `archive`, source windows first.
pub fn encode(archive: &DatasetArchive) -> (Manifest, Vec<u8>) {
    let mut samples = Vec::with_capacity(archive.source.len() + archive.target.len());
    let mut blob = Vec::new();
    let mut offset = 0u64;
    for (id, s) in archive.source.iter().chain(&archive.target).enumerate() {
        samples.push(ManifestEntry { id, label: s.label, speed: s.speed_rpm, domain: s.domain, offset, length: s.len() });
        for v in s.phases.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += s.phases.data().len() as u64;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        speed_rpm: archive.speed_rpm,
        sample_rate_hz: archive.sample_rate_hz,
        blob: BLOB.into(),
        samples,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8], origin: &Path) -> Result<DatasetArchive> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    if blob.len() % 8 != 0 {
        return Err(bad(format!("blob length {} is not a multiple of 8", blob.len())));
    }
    let values = blob.len() as u64 / 8;
    let mut archive = DatasetArchive {
        speed_rpm: manifest.speed_rpm,
        sample_rate_hz: manifest.sample_rate_hz,
        source: Vec::new(),
        target: Vec::new(),
    };
    let mut expected_offset = 0u64;
    for (i, e) in manifest.samples.iter().enumerate() {
        if e.id != i {
            return Err(bad(format!("sample {i} has id {}", e.id)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("sample {i} starts at {} instead of {expected_offset}", e.offset)));
        }
        let n = 3 * e.length as u64;
        if e.length == 0 || e.offset + n > values {
            return Err(bad(format!("sample {i} runs past the end of the blob")));
        }
        let start = (e.offset * 8) as usize;
        let data: Vec<f64> = blob[start..start + (n * 8) as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("sample {i} holds non-finite values")));
        }
        let sample = SignalSample {
            phases: Tensor::new(&[3, e.length], data)?,
            label: e.label,
            speed_rpm: e.speed,
            domain: e.domain,
            sample_rate_hz: manifest.sample_rate_hz,
        };
        match e.domain {
            Domain::Virtual => archive.source.push(sample),
            Domain::Physical => archive.target.push(sample),
        }
        expected_offset += n;
    }
    if expected_offset != values {
        return Err(bad(format!("blob holds {values} values, manifest accounts for {expected_offset}")));
    }
    Ok(archive)
}

pub fn write(dir: &Path, archive: &DatasetArchive) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let (manifest, blob) = encode(archive);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(io(&mpath))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(io(&bpath))
}

pub fn read(dir: &Path) -> Result<DatasetArchive> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: mpath.clone(), reason: e.to_string() })?;
    let bpath = dir.join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(io(&bpath))?;
    decode(&manifest, &blob, &mpath)
}
