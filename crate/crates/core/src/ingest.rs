//! Loading ECG recordings from CSV or raw float32 files and mapping them
//! onto the canonical 12-lead order.
//!
//! Two on-disk formats are supported:
//!
//! * **CSV**: the first line holds comma-separated lead names, every following
//!   line one sample per lead. The sampling rate is not part of the file and
//!   comes from the caller or from a sidecar `<stem>.json` manifest.
//! * **rawbin**: `<record_id>.f32` holds lead-major little-endian `f32`
//!   samples and `<record_id>.json` the [`RawbinManifest`].

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The canonical lead configuration, in order.
pub const CANONICAL_LEADS: [&str; 12] = [
    "I", "II", "III", "aVL", "aVR", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("non-finite sample in lead {lead} at index {index}")]
    NonFiniteSample { lead: String, index: usize },
    #[error("unknown lead name {0:?}")]
    UnknownLeadName(String),
    #[error("lead {0} missing")]
    MissingLead(String),
    #[error("lead {0} appears more than once")]
    DuplicateLead(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Csv,
    Rawbin,
}

impl std::str::FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "rawbin" | "f32" => Ok(Self::Rawbin),
            other => Err(format!("unknown record format {other:?}")),
        }
    }
}

/// A multi-lead ECG in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub leads: Vec<String>,
    /// One row per lead, all rows the same length.
    pub data: Vec<Vec<f64>>,
    pub fs: f64,
}

impl EcgRecord {
    /// Builds a record and checks every structural invariant.
    pub fn new(record_id: impl Into<String>, leads: Vec<String>, data: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        let rec = Self { record_id: record_id.into(), leads, data, fs };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    pub fn lead(&self, name: &str) -> Option<&[f64]> {
        let canon = canonical_lead_name(name)?;
        self.leads.iter().position(|l| l == canon).map(|i| self.data[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(IngestError::InvalidRecord(format!("sampling rate {} must be positive", self.fs)));
        }
        if self.leads.len() != self.data.len() {
            return Err(IngestError::InvalidRecord(format!(
                "{} lead names for {} data rows",
                self.leads.len(),
                self.data.len()
            )));
        }
        let n = self.n_samples();
        if let Some(row) = self.data.iter().position(|r| r.len() != n) {
            return Err(IngestError::InvalidRecord(format!(
                "lead {} has {} samples, expected {n}",
                self.leads[row],
                self.data[row].len()
            )));
        }
        let mut seen = HashSet::new();
        for lead in &self.leads {
            if !seen.insert(lead.as_str()) {
                return Err(IngestError::DuplicateLead(lead.clone()));
            }
        }
        check_finite(&self.leads, &self.data)
    }
}

fn check_finite(leads: &[String], data: &[Vec<f64>]) -> Result<()> {
    for (lead, row) in leads.iter().zip(data) {
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::NonFiniteSample { lead: lead.clone(), index });
        }
    }
    Ok(())
}

/// Resolves a lead name to its canonical spelling, ignoring case.
pub fn canonical_lead_name(name: &str) -> Option<&'static str> {
    let trimmed = name.trim();
    CANONICAL_LEADS.iter().copied().find(|c| c.eq_ignore_ascii_case(trimmed))
}

/// Reorders rows into [`CANONICAL_LEADS`] order.
///
/// Absent leads become zero rows when `fill_missing` is set and are an error
/// otherwise.
pub fn standardize_leads(record: &EcgRecord, fill_missing: bool) -> Result<EcgRecord> {
    let mut slots: [Option<usize>; 12] = [None; 12];
    for (row, name) in record.leads.iter().enumerate() {
        let canon = canonical_lead_name(name).ok_or_else(|| IngestError::UnknownLeadName(name.clone()))?;
        let slot = CANONICAL_LEADS.iter().position(|c| *c == canon).expect("canonical lead");
        if slots[slot].replace(row).is_some() {
            return Err(IngestError::DuplicateLead(canon.to_string()));
        }
    }
    let n = record.n_samples();
    let mut data = Vec::with_capacity(12);
    for (slot, name) in slots.iter().zip(CANONICAL_LEADS) {
        match slot {
            Some(row) => data.push(record.data[*row].clone()),
            None if fill_missing => data.push(vec![0.0; n]),
            None => return Err(IngestError::MissingLead(name.to_string())),
        }
    }
    Ok(EcgRecord {
        record_id: record.record_id.clone(),
        leads: CANONICAL_LEADS.iter().map(|s| s.to_string()).collect(),
        data,
        fs: record.fs,
    })
}

/// Sidecar manifest of a rawbin record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawbinManifest {
    pub record_id: String,
    pub leads: Vec<String>,
    pub fs: f64,
    pub n_samples: usize,
    /// Processing stage, e.g. `"raw"` or `"preprocessed"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Position of a segment within its source record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
    /// Source record for segments, whose `record_id` is derived.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_record_id: Option<String>,
}

/// Loads a record. `fs` is required for CSV unless a sidecar manifest
/// (`<stem>.json`) provides it; for rawbin it is read from the manifest and
/// the argument is ignored.
pub fn load_record(path: &Path, format: RecordFormat, fs: Option<f64>) -> Result<EcgRecord> {
    match format {
        RecordFormat::Csv => load_csv(path, fs),
        RecordFormat::Rawbin => load_rawbin(path).map(|(rec, _)| rec),
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedFile { path: path.to_path_buf(), reason: reason.into() }
}

fn record_id_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn canonicalize_names(names: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(names.len());
    let mut seen = HashSet::new();
    for name in names {
        let canon = canonical_lead_name(name).ok_or_else(|| IngestError::UnknownLeadName(name.clone()))?;
        if !seen.insert(canon) {
            return Err(IngestError::DuplicateLead(canon.to_string()));
        }
        out.push(canon.to_string());
    }
    Ok(out)
}

pub fn load_csv(path: &Path, fs: Option<f64>) -> Result<EcgRecord> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or_else(|| malformed(path, "empty file"))?;
    let names: Vec<String> = header.trim_end_matches('\r').split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(String::is_empty) {
        return Err(malformed(path, "empty lead name in header"));
    }
    let leads = canonicalize_names(&names)?;
    let mut data = vec![Vec::new(); leads.len()];
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != leads.len() {
            return Err(malformed(
                path,
                format!("row {} has {} cells, expected {}", lineno + 2, cells.len(), leads.len()),
            ));
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| malformed(path, format!("row {}: cannot parse {cell:?}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(IngestError::NonFiniteSample { lead: leads[col].clone(), index: data[col].len() });
            }
            data[col].push(v);
        }
    }
    let fs = match fs {
        Some(fs) => fs,
        None => {
            let sidecar = path.with_extension("json");
            if !sidecar.exists() {
                return Err(malformed(path, "sampling rate not given and no sidecar manifest"));
            }
            read_manifest(&sidecar)?.fs
        }
    };
    let rec = EcgRecord { record_id: record_id_from_path(path), leads, data, fs };
    rec.validate()?;
    Ok(rec)
}

/// Writes a CSV whose values parse back to the identical `f64`s.
pub fn save_csv(record: &EcgRecord, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", record.leads.join(","))?;
    let mut line = String::new();
    for i in 0..record.n_samples() {
        line.clear();
        for (j, row) in record.data.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&row[i].to_string());
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<RawbinManifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

/// Path pair `(<dir>/<id>.f32, <dir>/<id>.json)` for a rawbin record.
pub fn rawbin_paths(dir: &Path, record_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{record_id}.f32")), dir.join(format!("{record_id}.json")))
}

/// Loads a rawbin record; `path` may name either the `.f32` or the `.json` file.
pub fn load_rawbin(path: &Path) -> Result<(EcgRecord, RawbinManifest)> {
    let bin_path = path.with_extension("f32");
    let manifest_path = path.with_extension("json");
    let manifest = read_manifest(&manifest_path)?;
    let bytes = fs::read(&bin_path)?;
    let n_leads = manifest.leads.len();
    let expected = n_leads * manifest.n_samples * 4;
    if bytes.len() != expected {
        return Err(malformed(
            &bin_path,
            format!("{} bytes, manifest implies {expected}", bytes.len()),
        ));
    }
    let leads = canonicalize_names(&manifest.leads)?;
    let mut data = Vec::with_capacity(n_leads);
    for chunk in bytes.chunks_exact(manifest.n_samples.max(1) * 4).take(n_leads) {
        data.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect::<Vec<_>>(),
        );
    }
    if manifest.n_samples == 0 {
        data = vec![Vec::new(); n_leads];
    }
    let rec = EcgRecord { record_id: manifest.record_id.clone(), leads, data, fs: manifest.fs };
    rec.validate()?;
    Ok((rec, manifest))
}

/// Writes `<dir>/<record_id>.f32` and its manifest. Samples are narrowed to
/// `f32`, so a record loaded from rawbin saves back bit-exactly.
pub fn save_rawbin(record: &EcgRecord, dir: &Path, stage: Option<&str>) -> Result<RawbinManifest> {
    let manifest = RawbinManifest {
        record_id: record.record_id.clone(),
        leads: record.leads.clone(),
        fs: record.fs,
        n_samples: record.n_samples(),
        stage: stage.map(str::to_string),
        segment_index: None,
        source_record_id: None,
    };
    save_rawbin_with_manifest(record, dir, &manifest)?;
    Ok(manifest)
}

pub fn save_rawbin_with_manifest(record: &EcgRecord, dir: &Path, manifest: &RawbinManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (bin_path, manifest_path) = rawbin_paths(dir, &manifest.record_id);
    let mut bytes = Vec::with_capacity(record.n_leads() * record.n_samples() * 4);
    for row in &record.data {
        for v in row {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(bin_path, bytes)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(manifest_path, json)?;
    Ok(())
}
