//! Command-line pipeline for ECG retrieval-augmented generation: synthetic
//! fixtures, preprocessing, retrieval databases, tokenizer training, dataset
//! export, metric evaluation, ablation runs and a mock generation server.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod store;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ecgrag::ecg_bpe::{DEFAULT_ALPHABET, DEFAULT_MERGES};
use ecgrag::genclient::MockMode;

use crate::ablate::{AblateInputs, AblateOptions, AblationGrid};
use crate::commands::{RecordStore, Split};
use crate::config::Settings;

#[derive(Debug, Parser)]
#[command(name = "ecgrag", version, about = "ECG retrieval-augmented generation pipeline")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: SettingsFlags,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override config-file and environment settings.
#[derive(Debug, Default, Args)]
pub struct SettingsFlags {
    /// Retrieval at inference: on|off.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "on", value_name = "on|off")]
    pub rag: Option<String>,
    /// Number of retrieved reports.
    #[arg(long, global = true)]
    pub k: Option<String>,
    /// Where reports are inserted: system|user.
    #[arg(long, global = true)]
    pub rag_location: Option<String>,
    /// Replace retrieved reports with a dash placeholder: on|off.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "on", value_name = "on|off")]
    pub noise: Option<String>,
    /// IVF cells scanned per query.
    #[arg(long, global = true)]
    pub nprobe: Option<String>,
    /// Retrieval modality: signal|feature|both.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Generation endpoint URL, or mock:echo|mock:retrieval_echo|mock:fixed:<text>.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Prompt length limit in tokens.
    #[arg(long, global = true)]
    pub max_len: Option<String>,
    /// ECG tokens kept per prompt, or `none`.
    #[arg(long, global = true)]
    pub ecg_budget: Option<String>,
    /// Concurrent ablation rows.
    #[arg(long, global = true)]
    pub workers: Option<String>,
    /// Skip retrieved entries from the queried record: on|off.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "on", value_name = "on|off")]
    pub exclude_self: Option<String>,
}

impl SettingsFlags {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        [
            ("rag", &self.rag),
            ("k", &self.k),
            ("rag_location", &self.rag_location),
            ("noise", &self.noise),
            ("nprobe", &self.nprobe),
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("endpoint", &self.endpoint),
            ("max_len", &self.max_len),
            ("ecg_budget", &self.ecg_budget),
            ("workers", &self.workers),
            ("exclude_self", &self.exclude_self),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fixture: rawbin records, reports.jsonl, dataset.jsonl.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Filter, resample and segment raw records into a segment store.
    Preprocess {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate for CSV records without a time column.
        #[arg(long)]
        fs: Option<f64>,
    },
    /// Build or query a retrieval database.
    #[command(subcommand)]
    Db(DbCommand),
    /// ECG tokenizer commands.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Render a dataset into model-ready JSONL.
    Export {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        /// Retrieval database; required when retrieval is on.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Vocab file; defaults to a merge-free tokenizer.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// train (labels, all answers) or infer (final answer removed).
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Score predictions against references (JSONL joined by id).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid against a generation backend.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON plan; the full grid when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// IVF cell count; defaults to the square root of the entry count.
        #[arg(long)]
        nlist: Option<usize>,
        /// Discard the journal instead of resuming.
        #[arg(long)]
        restart: bool,
        /// Stop after this many new rows.
        #[arg(long)]
        max_rows: Option<usize>,
    },
    /// Serve a mock generation backend over HTTP until interrupted.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// echo, retrieval_echo or fixed:<text>.
        #[arg(long = "mock", default_value = "retrieval_echo")]
        mock_mode: MockMode,
    },
}

#[derive(Debug, Subcommand)]
pub enum DbCommand {
    Build {
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nlist: Option<usize>,
    },
    /// Print the top-k reports for stored segments as JSON.
    Query {
        #[arg(long)]
        db: PathBuf,
        /// Stored segment (`.json` or `.f32`); repeat to fuse several.
        #[arg(long = "segment", required = true)]
        segments: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCommand {
    Train {
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MERGES)]
        merges: usize,
        #[arg(long, default_value_t = DEFAULT_ALPHABET)]
        alphabet: u32,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Executes a parsed command line with settings from `env`.
pub fn run<I>(cli: Cli, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let settings = Settings::resolve(cli.config.as_deref(), env, &cli.settings.pairs())?;
    match cli.command {
        Command::Synth { out, count } => {
            ecgrag::synth::write_fixture(&out, count, settings.seed)
                .with_context(|| format!("writing fixture to {}", out.display()))?;
            println!("wrote {count} records to {}", out.display());
        }
        Command::Preprocess { input, out, fs } => print_json(&commands::preprocess(&input, &out, fs)?)?,
        Command::Db(DbCommand::Build { segments, reports, out, nlist }) => {
            let db = commands::db_build(&segments, &reports, &out, nlist, settings.seed)?;
            print_json(db.manifest())?;
        }
        Command::Db(DbCommand::Query { db, segments }) => {
            let paths: Vec<&Path> = segments.iter().map(PathBuf::as_path).collect();
            print_json(&commands::db_query(&db, &paths, &settings)?)?;
        }
        Command::Tokenizer(TokenizerCommand::Train { segments, out, merges, alphabet }) => {
            let vocab = commands::tokenizer_train(&segments, &out, merges, alphabet)?;
            println!("wrote {} ({} tokens)", out.display(), vocab.vocab_size());
        }
        Command::Export { dataset, segments, db, tokenizer, out, split } => {
            let samples = store::read_jsonl(&dataset)?;
            let records = RecordStore::load(&segments, &commands::load_vocab(tokenizer.as_deref())?)?;
            let db = match (&db, settings.rag) {
                (Some(dir), true) => Some(
                    ecgrag::ragdb::RagDatabase::load(dir).with_context(|| format!("loading database {}", dir.display()))?,
                ),
                _ => None,
            };
            let rows = commands::export(&samples, &records, db.as_ref(), split, &settings)?;
            store::write_jsonl(&out, &rows)?;
            println!("wrote {} samples to {}", rows.len(), out.display());
        }
        Command::Eval { pred, reference, out } => {
            let report = commands::eval(&pred, &reference)?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            }
            print_json(&report)?;
        }
        Command::Ablate { dataset, segments, reports, out, plan, tokenizer, nlist, restart, max_rows } => {
            let grid = match plan {
                Some(p) => AblationGrid::from_plan(&ablate::load_plan(&p)?, settings.seed)?,
                None => AblationGrid::full(settings.seed),
            };
            let inputs = AblateInputs { dataset, segments, reports, tokenizer, nlist };
            let outcome = ablate::run_ablation(&inputs, &grid, &settings, &out, &AblateOptions { restart, max_rows })?;
            if outcome.complete {
                print!("{}", std::fs::read_to_string(out.join(ablate::TABLE_FILE))?);
            } else {
                println!("{} of {} rows done; rerun to resume", outcome.rows.len(), grid.configs().len() * grid.seeds.len());
            }
        }
        Command::ServeMock { addr, mock_mode } => {
            let server = commands::serve_mock(&addr, mock_mode)?;
            println!("serving mock backend at {}", server.url());
            server.join();
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<A, I>(args: A, env: I) -> i32
where
    A: IntoIterator<Item = String>,
    I: IntoIterator<Item = (String, String)>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
