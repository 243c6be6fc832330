//! Ablation runs over retrieval settings: every configuration of the grid is
//! evaluated once per seed against a generation backend.
//!
//! Rows are appended to `journal.jsonl` by a single writer as workers finish
//! them; a rerun skips rows already completed, so an interrupted run resumes
//! where it stopped. Once every row is done, `results.csv` (one row per
//! configuration and seed), `summary.csv` and `table.txt` (mean ± std over
//! seeds) are written. None of the outputs depend on completion order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use anyhow::{bail, Context, Result};
use ecgrag::evalkit::{self, EvalPair};
use ecgrag::genclient::{GenRequest, Generator};
use ecgrag::promptkit::{self, ByteTokenizer, Conversation, DatasetSample, RagLocation, Special, Turn, DEFAULT_SYSTEM_PROMPT};
use ecgrag::ragdb::{BuildParams, RagDatabase};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{self, RecordStore};
use crate::config::Settings;
use crate::store;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const MAX_NEW_TOKENS: u32 = 256;

/// Grid requested by the user. Axes left out of a plan file take a single
/// default value; a plan that names no axis at all is rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    #[serde(default)]
    pub rag_train: Option<Vec<bool>>,
    #[serde(default)]
    pub rag_infer: Option<Vec<bool>>,
    #[serde(default, alias = "k")]
    pub k_values: Option<Vec<usize>>,
    #[serde(default)]
    pub locations: Option<Vec<String>>,
    #[serde(default)]
    pub noise: Option<Vec<bool>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

/// Fully resolved grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationGrid {
    pub rag_train: Vec<bool>,
    pub rag_infer: Vec<bool>,
    pub k_values: Vec<usize>,
    pub locations: Vec<RagLocation>,
    pub noise: Vec<bool>,
    pub seeds: Vec<u64>,
}

fn default_seeds(base: u64) -> Vec<u64> {
    (0..3).map(|i| base.wrapping_add(i)).collect()
}

impl AblationGrid {
    /// Every combination, with three seeds starting at `base_seed`.
    pub fn full(base_seed: u64) -> Self {
        Self {
            rag_train: vec![false, true],
            rag_infer: vec![false, true],
            k_values: vec![1, 5, 10],
            locations: vec![RagLocation::SystemPrompt, RagLocation::UserQuery],
            noise: vec![false, true],
            seeds: default_seeds(base_seed),
        }
    }

    pub fn from_plan(plan: &AblationPlan, base_seed: u64) -> Result<Self> {
        if *plan == AblationPlan::default() {
            bail!("empty plan: name at least one axis (rag_train, rag_infer, k_values, locations, noise, seeds)");
        }
        fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>, default: Vec<T>) -> Result<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => bail!("empty plan axis {name}"),
                Some(v) => Ok(v.clone()),
                None => Ok(default),
            }
        }
        let locations = axis("locations", &plan.locations, vec!["system".to_string()])?
            .iter()
            .map(|s| s.parse::<RagLocation>().map_err(anyhow::Error::msg))
            .collect::<Result<Vec<_>>>()?;
        let grid = Self {
            rag_train: axis("rag_train", &plan.rag_train, vec![true])?,
            rag_infer: axis("rag_infer", &plan.rag_infer, vec![true])?,
            k_values: axis("k_values", &plan.k_values, vec![1])?,
            locations,
            noise: axis("noise", &plan.noise, vec![false])?,
            seeds: axis("seeds", &plan.seeds, default_seeds(base_seed))?,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.contains(&0) {
            bail!("k values must be at least 1");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        Ok(())
    }

    /// Distinct configurations in grid order. Without retrieval at inference
    /// the k, location and noise axes do not apply and collapse to one row.
    pub fn configs(&self) -> Vec<RowConfig> {
        let mut out: Vec<RowConfig> = Vec::new();
        for &rag_train in &self.rag_train {
            for &rag_infer in &self.rag_infer {
                for &k in &self.k_values {
                    for &location in &self.locations {
                        for &noise in &self.noise {
                            let c = if rag_infer {
                                RowConfig { rag_train, rag_infer, k: Some(k), location: Some(location), noise: Some(noise) }
                            } else {
                                RowConfig { rag_train, rag_infer, k: None, location: None, noise: None }
                            };
                            if !out.contains(&c) {
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One point of the grid, excluding the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowConfig {
    pub rag_train: bool,
    pub rag_infer: bool,
    pub k: Option<usize>,
    pub location: Option<RagLocation>,
    pub noise: Option<bool>,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RowConfig {
    fn cells(&self) -> [String; 5] {
        [
            on_off(self.rag_train).into(),
            on_off(self.rag_infer).into(),
            self.k.map_or("-".into(), |k| k.to_string()),
            self.location.map_or("-".into(), |l| l.to_string()),
            self.noise.map_or("-".into(), |n| on_off(n).to_string()),
        ]
    }

    pub fn key(&self, seed: u64) -> String {
        let [t, i, k, l, n] = self.cells();
        format!("train={t}|infer={i}|k={k}|location={l}|noise={n}|seed={seed}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub accuracy: f64,
    pub n: usize,
    /// Samples that lost retrieved reports to the length limit.
    pub reports_trimmed: usize,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub key: String,
    pub config: RowConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RowMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean and sample standard deviation over the successful seeds of one
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config: RowConfig,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    /// `(mean, std)` for BLEU-4, ROUGE-L, METEOR and accuracy.
    pub stats: Option<[(f64, f64); 4]>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(grid: &AblationGrid, rows: &[RowResult]) -> Vec<SummaryRow> {
    grid.configs()
        .into_iter()
        .map(|config| {
            let mine: Vec<&RowResult> = rows.iter().filter(|r| r.config == config).collect();
            let ok: Vec<RowMetrics> = mine.iter().filter_map(|r| r.metrics).collect();
            let stats = (!ok.is_empty()).then(|| {
                let col = |f: fn(&RowMetrics) -> f64| mean_std(&ok.iter().map(f).collect::<Vec<_>>());
                [col(|m| m.bleu4), col(|m| m.rouge_l), col(|m| m.meteor), col(|m| m.accuracy)]
            });
            SummaryRow { config, seeds_ok: ok.len(), seeds_failed: mine.len() - ok.len(), stats }
        })
        .collect()
}

/// Input locations for an ablation run.
#[derive(Debug, Clone)]
pub struct AblateInputs {
    pub dataset: PathBuf,
    pub segments: PathBuf,
    pub reports: PathBuf,
    pub tokenizer: Option<PathBuf>,
    pub nlist: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct AblateOptions {
    /// Discard an existing journal instead of resuming from it.
    pub restart: bool,
    /// Stop after this many new rows (the run can be resumed later).
    pub max_rows: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<RowResult>,
    pub summary: Vec<SummaryRow>,
    pub complete: bool,
}

fn read_journal(path: &Path) -> Result<HashMap<String, RowResult>> {
    let mut done = HashMap::new();
    let Ok(text) = fs::read_to_string(path) else { return Ok(done) };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<RowResult>(line) {
            Ok(row) => {
                done.insert(row.key.clone(), row);
            }
            // A torn final line from an interrupted write is dropped.
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(done)
}

struct RunContext {
    samples: Vec<DatasetSample>,
    records: RecordStore,
    dbs: HashMap<u64, RagDatabase>,
    generator: Arc<dyn Generator>,
    settings: Settings,
}

fn eval_row(ctx: &RunContext, config: &RowConfig, seed: u64) -> Result<RowMetrics> {
    let mut settings = ctx.settings.clone();
    settings.rag = config.rag_infer;
    settings.k = config.k.unwrap_or(1);
    settings.rag_location = config.location.unwrap_or(RagLocation::SystemPrompt);
    settings.noise = config.noise.unwrap_or(false);
    let render = settings.render_options(false);
    let opts = settings.rag_options();
    let db = &ctx.dbs[&seed];
    let results = ctx
        .samples
        .par_iter()
        .map(|sample| -> Result<(EvalPair, bool)> {
            let first = &sample.turns[0];
            let reference = first.assistant.clone().with_context(|| format!("sample {} has no answer", sample.id))?;
            let conv = Conversation::new(
                DEFAULT_SYSTEM_PROMPT,
                ctx.records.tokens(&sample.record_id)?,
                vec![Turn::new(first.user.clone(), None)],
            )?;
            let conv = if opts.enabled {
                let hits = commands::retrieve(db, ctx.records.segments(&sample.record_id)?, opts.k, &settings)?;
                promptkit::assemble(&conv, &hits, &opts)?
            } else {
                conv
            };
            let (fitted, truncation) = promptkit::fit(&conv, &ByteTokenizer, &render)?;
            let request = GenRequest {
                prompt: promptkit::render_text(&fitted),
                max_new_tokens: MAX_NEW_TOKENS,
                temperature: 0.0,
                stop: vec![Special::EndOfTurn.text().to_string()],
            };
            let prediction = ctx.generator.generate(&request).with_context(|| format!("sample {}", sample.id))?.text;
            Ok((EvalPair { id: sample.id.clone(), prediction, reference }, truncation.reports_dropped > 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports_trimmed = results.iter().filter(|r| r.1).count();
    let pairs: Vec<EvalPair> = results.into_iter().map(|r| r.0).collect();
    let report = evalkit::evaluate(&pairs)?;
    Ok(RowMetrics {
        bleu4: report.bleu4,
        rouge_l: report.rouge_l,
        meteor: report.meteor,
        accuracy: report.accuracy,
        n: report.n,
        reports_trimmed,
    })
}

/// Runs (or resumes) the grid, writing outputs under `out_dir`.
pub fn run_ablation(
    inputs: &AblateInputs,
    grid: &AblationGrid,
    settings: &Settings,
    out_dir: &Path,
    options: &AblateOptions,
) -> Result<AblationOutcome> {
    grid.validate()?;
    let endpoint = settings.endpoint.clone().context("no endpoint configured (use --endpoint URL or mock:<mode>)")?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let journal_path = out_dir.join(JOURNAL_FILE);
    if options.restart && journal_path.exists() {
        fs::remove_file(&journal_path)?;
    }
    let done = read_journal(&journal_path)?;

    let configs = grid.configs();
    let jobs: Vec<(RowConfig, u64)> =
        configs.iter().flat_map(|c| grid.seeds.iter().map(move |s| (*c, *s))).collect();
    let mut pending: Vec<(RowConfig, u64)> = jobs
        .iter()
        .filter(|(c, s)| done.get(&c.key(*s)).is_none_or(|r| r.metrics.is_none()))
        .copied()
        .collect();
    if let Some(max) = options.max_rows {
        pending.truncate(max);
    }

    let mut rows_by_key: HashMap<String, RowResult> = done;
    if !pending.is_empty() {
        let samples: Vec<DatasetSample> = store::read_jsonl(&inputs.dataset)?;
        if samples.is_empty() {
            bail!("dataset {} is empty", inputs.dataset.display());
        }
        if let Some(s) = samples.iter().find(|s| s.turns.is_empty()) {
            bail!("sample {} has no turns", s.id);
        }
        let vocab = commands::load_vocab(inputs.tokenizer.as_deref())?;
        let records = RecordStore::load(&inputs.segments, &vocab)?;
        let reports = store::load_reports(&inputs.reports)?;
        let mut all: Vec<_> = records.segments.values().flatten().cloned().collect();
        all.sort_by(|a, b| (&a.record_id, a.segment_index).cmp(&(&b.record_id, b.segment_index)));
        let (items, _) = store::attach_reports(all, &reports);
        let mut seeds: Vec<u64> = pending.iter().filter(|(c, _)| c.rag_infer).map(|(_, s)| *s).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let dbs = seeds
            .iter()
            .map(|&seed| -> Result<(u64, RagDatabase)> {
                let params = BuildParams { nlist: inputs.nlist, seed, ..BuildParams::default() };
                Ok((seed, RagDatabase::build(&items, params)?))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        let ctx = RunContext { samples, records, dbs, generator: commands::make_generator(&endpoint)?, settings: settings.clone() };

        let mut journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<RowResult>();
        let workers = settings.workers.min(pending.len()).max(1);
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (ctx, pending, next) = (&ctx, &pending, &next);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((config, seed)) = pending.get(i) else { break };
                    let result = eval_row(ctx, config, *seed);
                    let row = RowResult {
                        key: config.key(*seed),
                        config: *config,
                        seed: *seed,
                        metrics: result.as_ref().ok().copied(),
                        error: result.err().map(|e| format!("{e:#}")),
                    };
                    if tx.send(row).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for row in rx {
                serde_json::to_writer(&mut journal, &row)?;
                journal.write_all(b"\n")?;
                journal.flush()?;
                match &row.error {
                    Some(e) => eprintln!("row {} failed: {e}", row.key),
                    None => eprintln!("row {} done", row.key),
                }
                rows_by_key.insert(row.key.clone(), row);
            }
            Ok(())
        })?;
    }

    let rows: Vec<RowResult> = jobs.iter().filter_map(|(c, s)| rows_by_key.get(&c.key(*s)).cloned()).collect();
    let complete = rows.len() == jobs.len();
    let summary = summarize(grid, &rows);
    if complete {
        write_results_csv(&out_dir.join(RESULTS_FILE), &rows)?;
        write_summary_csv(&out_dir.join(SUMMARY_FILE), &summary)?;
        fs::write(out_dir.join(TABLE_FILE), format_table(grid, &summary, &endpoint))?;
    }
    Ok(AblationOutcome { rows, summary, complete })
}

const CONFIG_HEADER: [&str; 5] = ["rag_train", "rag_infer", "k", "location", "noise"];

fn write_results_csv(path: &Path, rows: &[RowResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = CONFIG_HEADER.to_vec();
    header.extend(["seed", "status", "bleu4", "rouge_l", "meteor", "accuracy", "n", "reports_trimmed", "error"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.config.cells().to_vec();
        rec.push(r.seed.to_string());
        match &r.metrics {
            Some(m) => {
                rec.push("ok".into());
                rec.extend([m.bleu4, m.rouge_l, m.meteor, m.accuracy].map(|v| format!("{v:.6}")));
                rec.extend([m.n.to_string(), m.reports_trimmed.to_string(), String::new()]);
            }
            None => {
                rec.push("error".into());
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(r.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = CONFIG_HEADER.to_vec();
    header.extend(["seeds_ok", "seeds_failed"]);
    header.extend([
        "bleu4_mean", "bleu4_std", "rouge_l_mean", "rouge_l_std", "meteor_mean", "meteor_std", "accuracy_mean", "accuracy_std",
    ]);
    w.write_record(&header)?;
    for s in summary {
        let mut rec: Vec<String> = s.config.cells().to_vec();
        rec.extend([s.seeds_ok.to_string(), s.seeds_failed.to_string()]);
        match s.stats {
            Some(stats) => rec.extend(stats.iter().flat_map(|(m, sd)| [format!("{m:.6}"), format!("{sd:.6}")])),
            None => rec.extend(std::iter::repeat_n(String::new(), 8)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table of `mean ± std` cells.
pub fn format_table(grid: &AblationGrid, summary: &[SummaryRow], backend: &str) -> String {
    let seeds: Vec<String> = grid.seeds.iter().map(u64::to_string).collect();
    let mut out = String::new();
    let _ = writeln!(out, "# backend: {backend}; seeds: {}", seeds.join(", "));
    let _ = writeln!(
        out,
        "# The backend is not fine-tuned here, so rag_train only labels rows; use `ecgrag export --split train` to build the training corpus for that axis."
    );
    let headers = ["RAG train", "RAG infer", "k", "location", "noise", "BLEU-4", "ROUGE-L", "METEOR", "Accuracy", "failed"];
    let body: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            let mut cells = s.config.cells().to_vec();
            match s.stats {
                Some(stats) => cells.extend(stats.iter().map(|(m, sd)| format!("{m:.2} ± {sd:.2}"))),
                None => cells.extend(std::iter::repeat_n("error".to_string(), 4)),
            }
            cells.push(s.seeds_failed.to_string());
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|i| body.iter().map(|r| r[i].chars().count()).chain([headers[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = *w)).collect();
        format!("| {} |\n", padded.join(" | ")).replace(" \n", "\n")
    };
    out.push_str(&line(headers.iter().map(|h| h.to_string()).collect()));
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect()));
    for row in body {
        out.push_str(&line(row));
    }
    out
}

/// Reads a JSON plan file.
pub fn load_plan(path: &Path) -> Result<AblationPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_collapses_inference_off_rows() {
        let grid = AblationGrid::full(0);
        let configs = grid.configs();
        // 2 train settings x (1 collapsed + 3 k x 2 locations x 2 noise).
        assert_eq!(configs.len(), 2 * (1 + 12));
        assert!(configs.iter().filter(|c| !c.rag_infer).all(|c| c.k.is_none() && c.noise.is_none()));
    }

    #[test]
    fn partial_plans() {
        let plan: AblationPlan = serde_json::from_str(r#"{"k": [1, 5, 10]}"#).unwrap();
        let grid = AblationGrid::from_plan(&plan, 7).unwrap();
        assert_eq!(grid.configs().len(), 3);
        assert_eq!(grid.seeds, vec![7, 8, 9]);
        assert_eq!(grid.locations, vec![RagLocation::SystemPrompt]);

        assert!(AblationGrid::from_plan(&AblationPlan::default(), 0).is_err());
        let empty_axis: AblationPlan = serde_json::from_str(r#"{"noise": []}"#).unwrap();
        assert!(AblationGrid::from_plan(&empty_axis, 0).is_err());
        let dup: AblationPlan = serde_json::from_str(r#"{"seeds": [1, 1]}"#).unwrap();
        assert!(AblationGrid::from_plan(&dup, 0).is_err());
        assert!(serde_json::from_str::<AblationPlan>(r#"{"bogus": [1]}"#).is_err());
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn table_format() {
        let grid = AblationGrid::from_plan(&serde_json::from_str(r#"{"seeds": [0]}"#).unwrap(), 0).unwrap();
        let config = grid.configs()[0];
        let summary = vec![SummaryRow {
            config,
            seeds_ok: 1,
            seeds_failed: 0,
            stats: Some([(38.1, 0.05), (1.0, 0.0), (2.0, 0.0), (100.0, 0.0)]),
        }];
        let table = format_table(&grid, &summary, "mock:echo");
        assert!(table.contains("38.10 ± 0.05"), "{table}");
        assert!(table.contains("100.00 ± 0.00"));
    }
}
