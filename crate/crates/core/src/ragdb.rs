//! Retrieval database over ECG segments: an IVF index of raw signals, an IVF
//! index of feature vectors, and the diagnostic report linked to each entry.
//!
//! Results from several ranked lists (the two modalities, or several query
//! segments of one record) are combined with reciprocal rank fusion:
//! `score = sum 1 / (60 + rank)` over the lists an entry appears in.
//!
//! On disk a database is a directory with `manifest.json`, `reports.jsonl`,
//! `features.f32` (`count * 228` little-endian floats in entry order),
//! `signal.index/` and `feature.index/`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annindex::{AnnError, IvfFlatIndex, IvfParams, SearchHit, DEFAULT_MAX_ITERS, DEFAULT_NPROBE};
use crate::dsp::{Segment, SEGMENT_LEN};
use crate::features::{extract_features, FeatureError, FEATURE_DIM, FEATURE_LAYOUT_VERSION};

pub const SIGNAL_DIM: usize = 12 * SEGMENT_LEN;
pub const RRF_K: f64 = 60.0;
pub const DB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("no segments to index")]
    EmptyInput,
    #[error("empty report for {record_id} segment {segment_index}")]
    EmptyReport { record_id: String, segment_index: usize },
    #[error("duplicate entry for {record_id} segment {segment_index}")]
    DuplicateId { record_id: String, segment_index: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("corrupt database: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Index(#[from] AnnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RagError>;

/// Which index answers a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Signal,
    Feature,
    Both,
}

impl FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "signal" => Ok(Self::Signal),
            "feature" | "features" => Ok(Self::Feature),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown query mode {other:?} (expected signal, feature or both)")),
        }
    }
}

/// One stored row, without its vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub entry_id: u64,
    pub record_id: String,
    pub segment_index: usize,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbManifest {
    pub format_version: u32,
    pub feature_layout_version: u32,
    pub count: usize,
    pub signal_dim: usize,
    pub feature_dim: usize,
    pub signal_nlist: usize,
    pub feature_nlist: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub metric: String,
    pub fusion: String,
    pub rrf_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildParams {
    /// Cells per index; `None` picks `round(sqrt(n))`.
    pub nlist: Option<usize>,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self { nlist: None, max_iters: DEFAULT_MAX_ITERS, seed: 0 }
    }
}

/// A report returned by a query, in fused order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedReport {
    pub entry_id: u64,
    pub record_id: String,
    pub segment_index: usize,
    pub report: String,
    pub fused_score: f64,
    /// 1-based position in the returned list.
    pub rank: usize,
    pub signal_rank: Option<usize>,
    pub feature_rank: Option<usize>,
    pub signal_distance: Option<f64>,
    pub feature_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagDatabase {
    manifest: DbManifest,
    entries: Vec<EntryMeta>,
    features: Vec<f32>,
    signal_index: IvfFlatIndex,
    feature_index: IvfFlatIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Signal,
    Feature,
}

/// Best `(rank, distance)` per modality: signal, then feature.
type ModalityRanks = [Option<(usize, f64)>; 2];

/// Fuses ranked lists; ties in score go to the smaller entry id.
fn rrf_fuse(lists: &[(Modality, Vec<SearchHit>)], k: usize) -> Vec<(u64, f64, ModalityRanks)> {
    let mut acc: BTreeMap<u64, (f64, ModalityRanks)> = BTreeMap::new();
    for (modality, hits) in lists {
        let slot = match modality {
            Modality::Signal => 0,
            Modality::Feature => 1,
        };
        for h in hits {
            let e = acc.entry(h.id).or_insert((0.0, [None, None]));
            e.0 += 1.0 / (RRF_K + h.rank as f64);
            let better = e.1[slot].is_none_or(|(r, _)| h.rank < r);
            if better {
                e.1[slot] = Some((h.rank, h.distance));
            }
        }
    }
    let mut fused: Vec<_> = acc.into_iter().map(|(id, (score, src))| (id, score, src)).collect();
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    fused.truncate(k);
    fused
}

/// Drops hits from `record_id` and re-numbers the remaining ranks.
pub fn exclude_self(hits: Vec<RetrievedReport>, record_id: &str) -> Vec<RetrievedReport> {
    hits.into_iter()
        .filter(|h| h.record_id != record_id)
        .enumerate()
        .map(|(i, mut h)| {
            h.rank = i + 1;
            h
        })
        .collect()
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

impl RagDatabase {
    /// Indexes `(segment, report)` pairs. Entry ids follow input order.
    pub fn build(items: &[(Segment, String)], params: BuildParams) -> Result<Self> {
        if items.is_empty() {
            return Err(RagError::EmptyInput);
        }
        let mut seen = HashSet::new();
        for (seg, report) in items {
            if report.trim().is_empty() {
                return Err(RagError::EmptyReport { record_id: seg.record_id.clone(), segment_index: seg.segment_index });
            }
            if !seen.insert((seg.record_id.as_str(), seg.segment_index)) {
                return Err(RagError::DuplicateId { record_id: seg.record_id.clone(), segment_index: seg.segment_index });
            }
        }
        let n = items.len();
        let nlist = params.nlist.unwrap_or_else(|| IvfParams::for_count(n, params.seed).nlist);
        let ivf_params = IvfParams { nlist, max_iters: params.max_iters, seed: params.seed };

        let feature_vectors =
            items.par_iter().map(|(seg, _)| extract_features(seg).map(|f| f.to_f32())).collect::<std::result::Result<Vec<_>, _>>()?;
        let features: Vec<f32> = feature_vectors.concat();
        let signals: Vec<f32> = items.iter().flat_map(|(seg, _)| seg.flatten()).collect();

        let (signal_index, feature_index) = rayon::join(
            || IvfFlatIndex::train(&signals, SIGNAL_DIM, ivf_params),
            || IvfFlatIndex::train(&features, FEATURE_DIM, ivf_params),
        );
        let (mut signal_index, mut feature_index) = (signal_index?, feature_index?);
        let mut entries = Vec::with_capacity(n);
        for (i, (seg, report)) in items.iter().enumerate() {
            let id = i as u64;
            signal_index.add(id, &signals[i * SIGNAL_DIM..(i + 1) * SIGNAL_DIM])?;
            feature_index.add(id, &features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM])?;
            entries.push(EntryMeta {
                entry_id: id,
                record_id: seg.record_id.clone(),
                segment_index: seg.segment_index,
                report: report.clone(),
            });
        }
        let manifest = DbManifest {
            format_version: DB_FORMAT_VERSION,
            feature_layout_version: FEATURE_LAYOUT_VERSION,
            count: n,
            signal_dim: SIGNAL_DIM,
            feature_dim: FEATURE_DIM,
            signal_nlist: nlist,
            feature_nlist: nlist,
            max_iters: params.max_iters,
            seed: params.seed,
            metric: "l2_squared".into(),
            fusion: "rrf".into(),
            rrf_k: RRF_K,
        };
        Ok(Self { manifest, entries, features, signal_index, feature_index })
    }

    pub fn manifest(&self) -> &DbManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.entries
    }

    pub fn entry(&self, id: u64) -> Option<&EntryMeta> {
        self.entries.get(id as usize)
    }

    pub fn signal_index(&self) -> &IvfFlatIndex {
        &self.signal_index
    }

    pub fn feature_index(&self) -> &IvfFlatIndex {
        &self.feature_index
    }

    /// Stored feature vector of an entry.
    pub fn feature_vector(&self, id: u64) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.entries.len()).then(|| &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM])
    }

    /// Number of stored entries that came from `record_id`.
    pub fn record_entry_count(&self, record_id: &str) -> usize {
        self.entries.iter().filter(|e| e.record_id == record_id).count()
    }

    /// Top-`k` reports for one segment.
    pub fn query(&self, segment: &Segment, k: usize, mode: QueryMode, nprobe: Option<usize>) -> Result<Vec<RetrievedReport>> {
        self.query_segments(std::slice::from_ref(segment), k, mode, nprobe)
    }

    /// Top-`k` reports for a group of segments (typically one record), fusing
    /// every per-segment, per-modality list. `nprobe` defaults to 8 and is
    /// capped at each index's cell count.
    pub fn query_segments(
        &self,
        segments: &[Segment],
        k: usize,
        mode: QueryMode,
        nprobe: Option<usize>,
    ) -> Result<Vec<RetrievedReport>> {
        if self.is_empty() {
            return Err(RagError::EmptyDatabase);
        }
        if k == 0 {
            return Err(RagError::BadParams("k must be at least 1".into()));
        }
        if segments.is_empty() {
            return Err(RagError::BadParams("no query segments".into()));
        }
        let nprobe = nprobe.unwrap_or(DEFAULT_NPROBE);
        if nprobe == 0 {
            return Err(RagError::BadParams("nprobe must be at least 1".into()));
        }
        let per_list = k.min(self.len());
        let lists = segments
            .par_iter()
            .map(|seg| -> Result<Vec<(Modality, Vec<SearchHit>)>> {
                let mut lists = Vec::with_capacity(2);
                if mode != QueryMode::Feature {
                    let probe = nprobe.min(self.signal_index.nlist());
                    lists.push((Modality::Signal, self.signal_index.search(&seg.flatten(), per_list, probe)?));
                }
                if mode != QueryMode::Signal {
                    let probe = nprobe.min(self.feature_index.nlist());
                    let fv = extract_features(seg)?.to_f32();
                    lists.push((Modality::Feature, self.feature_index.search(&fv, per_list, probe)?));
                }
                Ok(lists)
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        Ok(rrf_fuse(&lists, k)
            .into_iter()
            .enumerate()
            .map(|(i, (id, score, [signal, feature]))| {
                let meta = &self.entries[id as usize];
                RetrievedReport {
                    entry_id: id,
                    record_id: meta.record_id.clone(),
                    segment_index: meta.segment_index,
                    report: meta.report.clone(),
                    fused_score: score,
                    rank: i + 1,
                    signal_rank: signal.map(|s| s.0),
                    feature_rank: feature.map(|f| f.0),
                    signal_distance: signal.map(|s| s.1),
                    feature_distance: feature.map(|f| f.1),
                }
            })
            .collect())
    }

    /// As [`query_segments`](Self::query_segments) but never returning
    /// entries of `record_id`; still yields `k` reports when enough remain.
    pub fn query_excluding(
        &self,
        segments: &[Segment],
        k: usize,
        mode: QueryMode,
        nprobe: Option<usize>,
        record_id: &str,
    ) -> Result<Vec<RetrievedReport>> {
        let extra = self.record_entry_count(record_id);
        let mut hits = exclude_self(self.query_segments(segments, k + extra, mode, nprobe)?, record_id);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("reports.jsonl"))?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        write_f32s(&dir.join("features.f32"), &self.features)?;
        self.signal_index.save(&dir.join("signal.index"))?;
        self.feature_index.save(&dir.join("feature.index"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DbManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != DB_FORMAT_VERSION || manifest.feature_layout_version != FEATURE_LAYOUT_VERSION {
            return Err(RagError::Corrupt(format!(
                "unsupported versions: format {}, feature layout {}",
                manifest.format_version, manifest.feature_layout_version
            )));
        }
        let mut entries = Vec::with_capacity(manifest.count);
        for line in BufReader::new(fs::File::open(dir.join("reports.jsonl"))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str::<EntryMeta>(&line)?);
            }
        }
        let by_position = entries.iter().enumerate().all(|(i, e)| e.entry_id == i as u64);
        if entries.len() != manifest.count || !by_position {
            return Err(RagError::Corrupt("reports.jsonl does not match manifest".into()));
        }
        let raw = fs::read(dir.join("features.f32"))?;
        if raw.len() != manifest.count * FEATURE_DIM * 4 {
            return Err(RagError::Corrupt(format!("features.f32 has {} bytes", raw.len())));
        }
        let features = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let signal_index = IvfFlatIndex::load(&dir.join("signal.index"))?;
        let feature_index = IvfFlatIndex::load(&dir.join("feature.index"))?;
        for index in [&signal_index, &feature_index] {
            if index.len() != manifest.count || !(0..manifest.count as u64).all(|id| index.contains(id)) {
                return Err(RagError::Corrupt("index ids do not match the report store".into()));
            }
        }
        Ok(Self { manifest, entries, features, signal_index, feature_index })
    }
}

/// Groups segments by record id, preserving first-seen order.
pub fn group_by_record(segments: Vec<Segment>) -> Vec<(String, Vec<Segment>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Segment>> = HashMap::new();
    for seg in segments {
        if !groups.contains_key(&seg.record_id) {
            order.push(seg.record_id.clone());
        }
        groups.entry(seg.record_id.clone()).or_default().push(seg);
    }
    order.into_iter().map(|id| {
        let segs = groups.remove(&id).unwrap();
        (id, segs)
    }).collect()
}
