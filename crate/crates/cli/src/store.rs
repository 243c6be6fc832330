//! On-disk inputs and outputs: record discovery, the processed segment
//! store, and JSONL helpers.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ecgrag::dsp::Segment;
use ecgrag::ingest::{self, RawbinManifest, RecordFormat};
use ecgrag::synth::ReportLine;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// `stage` tag written into segment manifests.
pub const SEGMENT_STAGE: &str = "segment";

fn read_manifest(path: &Path) -> Result<RawbinManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    Ok(paths)
}

/// Raw records in `dir`: `*.csv` files and rawbin manifests that are not
/// segments. Sorted by path.
pub fn find_records(dir: &Path) -> Result<Vec<(PathBuf, RecordFormat)>> {
    let mut out = Vec::new();
    for path in sorted_entries(dir)? {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => out.push((path, RecordFormat::Csv)),
            Some("json")
                if path.with_extension("f32").exists()
                    && read_manifest(&path)?.stage.as_deref() != Some(SEGMENT_STAGE) =>
            {
                out.push((path, RecordFormat::Rawbin));
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn write_segment(dir: &Path, seg: &Segment) -> Result<()> {
    let rec = seg.to_record();
    let manifest = RawbinManifest {
        record_id: rec.record_id.clone(),
        leads: rec.leads.clone(),
        fs: rec.fs,
        n_samples: rec.n_samples(),
        stage: Some(SEGMENT_STAGE.into()),
        segment_index: Some(seg.segment_index),
        source_record_id: Some(seg.record_id.clone()),
    };
    ingest::save_rawbin_with_manifest(&rec, dir, &manifest).with_context(|| format!("writing segment {}", rec.record_id))
}

/// Loads one stored segment from its `.json` or `.f32` path.
pub fn load_segment(path: &Path) -> Result<Segment> {
    let (rec, manifest) = ingest::load_rawbin(path).with_context(|| format!("loading {}", path.display()))?;
    let (Some(index), Some(source)) = (manifest.segment_index, manifest.source_record_id) else {
        bail!("{} is not a stored segment", path.display());
    };
    Segment::new(source, index, rec.data).with_context(|| format!("loading {}", path.display()))
}

/// All segments in a store, ordered by `(record_id, segment_index)`.
pub fn load_segments(dir: &Path) -> Result<Vec<Segment>> {
    let manifests: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("f32").exists())
        .collect();
    let mut segments: Vec<Segment> = manifests.par_iter().map(|p| load_segment(p)).collect::<Result<_>>()?;
    if segments.is_empty() {
        bail!("no segments found in {}", dir.display());
    }
    segments.sort_by(|a, b| (&a.record_id, a.segment_index).cmp(&(&b.record_id, b.segment_index)));
    Ok(segments)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `record_id -> report` from a reports JSONL file.
pub fn load_reports(path: &Path) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in read_jsonl::<ReportLine>(path)? {
        if out.insert(line.record_id.clone(), line.report).is_some() {
            bail!("{}: duplicate report for {}", path.display(), line.record_id);
        }
    }
    Ok(out)
}

/// Pairs each segment with its record's report; segments without a report
/// are skipped and counted.
pub fn attach_reports(segments: Vec<Segment>, reports: &HashMap<String, String>) -> (Vec<(Segment, String)>, usize) {
    let mut skipped = 0;
    let items = segments
        .into_iter()
        .filter_map(|s| match reports.get(&s.record_id) {
            Some(r) => Some((s, r.clone())),
            None => {
                skipped += 1;
                None
            }
        })
        .collect();
    (items, skipped)
}
