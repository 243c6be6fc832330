//! Subcommand implementations, callable without going through argument
//! parsing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use ecgrag::dsp::{self, Segment};
use ecgrag::ecg_bpe::{self, BpeVocab, DEFAULT_ALPHABET};
use ecgrag::evalkit::{self, EvalReport};
use ecgrag::genclient::{EndpointConfig, Generator, HttpGenerator, MockGenerator, MockMode, MockServer, MockServerOptions};
use ecgrag::ingest;
use ecgrag::promptkit::{
    self, ByteTokenizer, Conversation, DatasetSample, ExportRag, ExportRecord, RagLocation, DEFAULT_SYSTEM_PROMPT,
};
use ecgrag::ragdb::{group_by_record, BuildParams, RagDatabase, RetrievedReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Settings;
use crate::store;

/// ECG tokens shown in export previews.
pub const PREVIEW_ECG_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PreprocessSummary {
    pub records: usize,
    pub segments: usize,
}

/// Filters, resamples and segments every record in `in_dir` into a segment
/// store at `out_dir`.
pub fn preprocess(in_dir: &Path, out_dir: &Path, fs: Option<f64>) -> Result<PreprocessSummary> {
    let records = store::find_records(in_dir)?;
    if records.is_empty() {
        bail!("no records found in {}", in_dir.display());
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let counts = records
        .par_iter()
        .map(|(path, format)| -> Result<usize> {
            let ctx = || format!("processing {}", path.display());
            let rec = ingest::load_record(path, *format, fs).with_context(ctx)?;
            let rec = ingest::standardize_leads(&rec, false).with_context(ctx)?;
            let segments = dsp::preprocess(&rec).with_context(ctx)?;
            for seg in &segments {
                store::write_segment(out_dir, seg)?;
            }
            Ok(segments.len())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreprocessSummary { records: records.len(), segments: counts.iter().sum() })
}

/// Builds and saves a retrieval database from a segment store and reports.
pub fn db_build(segments_dir: &Path, reports: &Path, out: &Path, nlist: Option<usize>, seed: u64) -> Result<RagDatabase> {
    let reports = store::load_reports(reports)?;
    let (items, skipped) = store::attach_reports(store::load_segments(segments_dir)?, &reports);
    if skipped > 0 {
        eprintln!("skipping {skipped} segments without a report");
    }
    let db = RagDatabase::build(&items, BuildParams { nlist, seed, ..BuildParams::default() })?;
    db.save(out).with_context(|| format!("saving database to {}", out.display()))?;
    Ok(db)
}

/// Queries a saved database with stored segments, fused as one record.
pub fn db_query(db_dir: &Path, segment_paths: &[&Path], settings: &Settings) -> Result<Vec<RetrievedReport>> {
    if segment_paths.is_empty() {
        bail!("no query segments given");
    }
    let db = RagDatabase::load(db_dir).with_context(|| format!("loading database {}", db_dir.display()))?;
    let segments: Vec<Segment> = segment_paths.iter().map(|p| store::load_segment(p)).collect::<Result<_>>()?;
    retrieve(&db, &segments, settings.k, settings)
}

/// Top-`k` reports for a record's segments, honouring `exclude_self`.
pub(crate) fn retrieve(db: &RagDatabase, segments: &[Segment], k: usize, settings: &Settings) -> Result<Vec<RetrievedReport>> {
    Ok(if settings.exclude_self {
        db.query_excluding(segments, k, settings.mode, settings.nprobe, &segments[0].record_id)?
    } else {
        db.query_segments(segments, k, settings.mode, settings.nprobe)?
    })
}

/// Trains an ECG tokenizer on every segment in a store.
pub fn tokenizer_train(segments_dir: &Path, out: &Path, merges: usize, alphabet: u32) -> Result<BpeVocab> {
    let segments = store::load_segments(segments_dir)?;
    let corpus: Vec<Vec<u32>> = segments.par_iter().map(|s| ecg_bpe::quantize(&s.to_record(), alphabet)).collect();
    let vocab = ecg_bpe::train_bpe(&corpus, alphabet, merges)?;
    vocab.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(vocab)
}

/// Tokenizer from a vocab file, or a merge-free one over the default alphabet.
pub fn load_vocab(path: Option<&Path>) -> Result<BpeVocab> {
    match path {
        Some(p) => BpeVocab::load(p).with_context(|| format!("loading tokenizer {}", p.display())),
        None => Ok(BpeVocab::new(DEFAULT_ALPHABET, Vec::new())?),
    }
}

/// Segments of each record plus their ECG token streams.
pub struct RecordStore {
    pub segments: HashMap<String, Vec<Segment>>,
    pub ecg_tokens: HashMap<String, Vec<u32>>,
}

impl RecordStore {
    pub fn load(segments_dir: &Path, vocab: &BpeVocab) -> Result<Self> {
        let groups = group_by_record(store::load_segments(segments_dir)?);
        let ecg_tokens = groups
            .par_iter()
            .map(|(id, segs)| -> Result<(String, Vec<u32>)> {
                let mut ids = Vec::new();
                for s in segs {
                    ids.extend(ecg_bpe::encode_record(&s.to_record(), vocab)?.ids);
                }
                Ok((id.clone(), ids))
            })
            .collect::<Result<_>>()?;
        Ok(Self { segments: groups.into_iter().collect(), ecg_tokens })
    }

    pub fn segments(&self, record_id: &str) -> Result<&[Segment]> {
        self.segments.get(record_id).map(Vec::as_slice).ok_or_else(|| anyhow!("no segments for record {record_id}"))
    }

    pub fn tokens(&self, record_id: &str) -> Result<Vec<u32>> {
        self.ecg_tokens.get(record_id).cloned().ok_or_else(|| anyhow!("no segments for record {record_id}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every turn answered; labels included.
    Train,
    /// Final answer removed; the prompt ends at the open assistant header.
    Infer,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "infer" | "inference" | "test" => Ok(Self::Infer),
            other => Err(format!("unknown split {other:?} (expected train or infer)")),
        }
    }
}

/// Builds the conversation for a dataset sample, with retrieval applied.
pub fn build_conversation(
    sample: &DatasetSample,
    records: &RecordStore,
    db: Option<&RagDatabase>,
    split: Split,
    settings: &Settings,
) -> Result<Conversation> {
    let mut turns = sample.turns.clone();
    if split == Split::Infer {
        if let Some(last) = turns.last_mut() {
            last.assistant = None;
        }
    }
    let conv = Conversation::new(DEFAULT_SYSTEM_PROMPT, records.tokens(&sample.record_id)?, turns)
        .with_context(|| format!("sample {}", sample.id))?;
    let opts = settings.rag_options();
    if !opts.enabled {
        return Ok(conv);
    }
    let db = db.ok_or_else(|| anyhow!("retrieval is on but no database was given"))?;
    let hits = retrieve(db, records.segments(&sample.record_id)?, opts.k, settings)?;
    Ok(promptkit::assemble(&conv, &hits, &opts)?)
}

fn export_rag(conv: &Conversation, settings: &Settings) -> ExportRag {
    match &conv.rag {
        Some(rag) if settings.rag => ExportRag {
            enabled: true,
            k: settings.k,
            location: rag.location,
            noise: rag.noise,
            entry_ids: rag.entry_ids.clone(),
        },
        _ => ExportRag {
            enabled: settings.rag,
            k: if settings.rag { settings.k } else { 0 },
            location: if settings.rag { settings.rag_location } else { RagLocation::SystemPrompt },
            noise: settings.rag && settings.noise,
            entry_ids: Vec::new(),
        },
    }
}

/// Renders a dataset into model-ready JSONL rows.
pub fn export(
    samples: &[DatasetSample],
    records: &RecordStore,
    db: Option<&RagDatabase>,
    split: Split,
    settings: &Settings,
) -> Result<Vec<ExportRecord>> {
    samples
        .par_iter()
        .map(|sample| -> Result<ExportRecord> {
            let conv = build_conversation(sample, records, db, split, settings)?;
            let (fitted, _) = promptkit::fit(&conv, &ByteTokenizer, &settings.render_options(true))?;
            let bundle = promptkit::render_and_label(&fitted, &ByteTokenizer, &settings.render_options(true))?;
            Ok(ExportRecord {
                record_id: sample.record_id.clone(),
                input_ids: bundle.input_ids,
                labels: (split == Split::Train).then_some(bundle.labels),
                text_preview: promptkit::render_preview(&fitted, PREVIEW_ECG_TOKENS),
                rag: export_rag(&fitted, settings),
            })
        })
        .collect::<Result<Vec<_>>>()
        .context("exporting dataset")
}

/// Scores a predictions file against a references file, joined by id.
pub fn eval(pred: &Path, reference: &Path) -> Result<EvalReport> {
    let preds = evalkit::read_jsonl_field(pred, "prediction").with_context(|| format!("reading {}", pred.display()))?;
    let refs =
        evalkit::read_jsonl_field(reference, "reference").with_context(|| format!("reading {}", reference.display()))?;
    let pairs = evalkit::join_by_id(preds, refs)?;
    Ok(evalkit::evaluate(&pairs)?)
}

/// Generator for an endpoint string: `mock:<mode>` or an HTTP URL.
pub fn make_generator(endpoint: &str) -> Result<Arc<dyn Generator>> {
    if let Some(mode) = endpoint.strip_prefix("mock:") {
        let mode: MockMode = mode.parse().map_err(|e: String| anyhow!(e))?;
        return Ok(Arc::new(MockGenerator::new(mode)));
    }
    if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
        bail!("endpoint must be an http(s) URL or mock:<mode>, got {endpoint:?}");
    }
    let mut config = EndpointConfig::new(endpoint);
    config.auth_token = std::env::var("ECGRAG_API_TOKEN").ok().filter(|t| !t.is_empty());
    Ok(Arc::new(HttpGenerator::new(config)?))
}

/// Starts a mock generation server; returns once it is listening.
pub fn serve_mock(addr: &str, mode: MockMode) -> Result<MockServer> {
    MockServer::start(addr, mode, MockServerOptions::default()).with_context(|| format!("binding {addr}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert_eq!("infer".parse::<Split>().unwrap(), Split::Infer);
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn generator_endpoints() {
        assert!(make_generator("mock:echo").is_ok());
        assert!(make_generator("mock:nonsense").is_err());
        assert!(make_generator("ftp://x").is_err());
        assert!(make_generator("http://127.0.0.1:9/generate").is_ok());
    }

    #[test]
    fn default_vocab_has_no_merges() {
        assert_eq!(load_vocab(None).unwrap().vocab_size(), DEFAULT_ALPHABET as usize);
    }
}
