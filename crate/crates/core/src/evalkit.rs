//! Text-generation metrics over (prediction, reference) pairs: corpus BLEU-4,
//! ROUGE-L F-measure, exact-match METEOR and normalized-exact-match accuracy.
//!
//! All scores are reported on a 0..100 scale. Texts are lowercased and
//! punctuation is split into separate tokens before scoring.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epsilon added to zero n-gram match counts in BLEU.
pub const BLEU_EPSILON: f64 = 0.1;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Search-node budget for the minimum-chunk METEOR alignment.
pub const METEOR_NODE_BUDGET: usize = 200_000;

pub const ACCURACY_DEFINITION: &str = "normalized exact match: lowercase, trim, collapse internal whitespace, \
     strip trailing punctuation; accuracy = percentage of pairs whose normalized texts are equal";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction/reference pairs to score")]
    Empty,
    #[error("unmatched ids: {0:?}")]
    UnmatchedIds(Vec<String>),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub prediction: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub accuracy: f64,
    pub n: usize,
    pub accuracy_definition: String,
}

/// Lowercases and splits on whitespace, emitting each punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if c.is_ascii_punctuation() {
                tokens.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Canonical form used for accuracy.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Per-pair sufficient statistics for corpus BLEU-4.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(hyp: &[String], reference: &[String]) -> Self {
        let mut s = Self { hyp_len: hyp.len(), ref_len: reference.len(), ..Self::default() };
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    fn add(mut self, o: &Self) -> Self {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }

    fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| {
                let denom = self.totals[i].max(1) as f64;
                let num = if self.matches[i] == 0 { BLEU_EPSILON } else { self.matches[i] as f64 };
                (num / denom).ln()
            })
            .sum::<f64>()
            / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_p.exp()
    }
}

/// Corpus-level BLEU-4 on a 0..100 scale.
pub fn corpus_bleu4(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let total = pairs.iter().map(|(h, r)| BleuStats::of(h, r)).fold(BleuStats::default(), |a, s| a.add(&s));
    100.0 * total.score()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F-measure in 0..1.
pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Minimum-chunk alignment search over exact unigram matches.
struct ChunkSearch<'a> {
    hyp: &'a [String],
    ref_positions: HashMap<&'a str, Vec<usize>>,
    /// Occurrences of each hyp token at or after each position.
    remaining_in_hyp: Vec<usize>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn dfs(
        &mut self,
        i: usize,
        last: Option<(usize, usize)>,
        chunks: usize,
        used: &mut HashSet<usize>,
        needed: &mut HashMap<&str, usize>,
    ) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_NODE_BUDGET {
            return;
        }
        if i == self.hyp.len() {
            self.best = chunks;
            return;
        }
        let w = self.hyp[i].as_str();
        let need = needed.get(w).copied().unwrap_or(0);
        if need > 0 {
            let positions = self.ref_positions[w].clone();
            // Try the chunk-continuing position first.
            let cont = last.filter(|&(li, _)| li + 1 == i).map(|(_, lj)| lj + 1);
            let mut order: Vec<usize> = positions.iter().copied().filter(|j| !used.contains(j)).collect();
            order.sort_by_key(|&j| (Some(j) != cont, j));
            for j in order {
                let extra = usize::from(Some(j) != cont);
                used.insert(j);
                *needed.get_mut(w).unwrap() -= 1;
                self.dfs(i + 1, Some((i, j)), chunks + extra, used, needed);
                *needed.get_mut(w).unwrap() += 1;
                used.remove(&j);
            }
        }
        // Leave this occurrence unmatched only if enough later ones remain.
        if self.remaining_in_hyp[i] > need {
            self.dfs(i + 1, last, chunks, used, needed);
        }
    }
}

/// Number of matched unigrams and the minimum number of contiguous chunks
/// over all maximum-size one-to-one exact alignments.
pub fn meteor_alignment(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_positions.entry(w.as_str()).or_default().push(j);
    }
    let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *hyp_counts.entry(w.as_str()).or_insert(0) += 1;
    }
    let mut needed: HashMap<&str, usize> = hyp_counts
        .iter()
        .map(|(w, c)| (*w, (*c).min(ref_positions.get(w).map_or(0, Vec::len))))
        .collect();
    let matches: usize = needed.values().sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut remaining_in_hyp = vec![0; hyp.len()];
    for i in (0..hyp.len()).rev() {
        let c = seen.entry(hyp[i].as_str()).or_insert(0);
        *c += 1;
        remaining_in_hyp[i] = *c;
    }
    let mut search = ChunkSearch { hyp, ref_positions, remaining_in_hyp, best: matches + 1, nodes: 0 };
    search.dfs(0, None, 0, &mut HashSet::new(), &mut needed);
    (matches, search.best.min(matches))
}

/// Sentence-level exact-match METEOR in 0..1.
pub fn meteor(hyp: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Scores all pairs. Sentence-level metrics are averaged over pairs.
pub fn evaluate(pairs: &[EvalPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let tokenized: Vec<(Vec<String>, Vec<String>)> =
        pairs.par_iter().map(|p| (tokenize(&p.prediction), tokenize(&p.reference))).collect();
    let per_pair: Vec<(f64, f64, bool)> = tokenized
        .par_iter()
        .zip(pairs.par_iter())
        .map(|((h, r), p)| (rouge_l(h, r), meteor(h, r), normalize(&p.prediction) == normalize(&p.reference)))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&(f64, f64, bool)) -> f64| 100.0 * per_pair.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        bleu4: corpus_bleu4(&tokenized),
        rouge_l: mean(&|t| t.0),
        meteor: mean(&|t| t.1),
        accuracy: mean(&|t| f64::from(u8::from(t.2))),
        n: pairs.len(),
        accuracy_definition: ACCURACY_DEFINITION.to_string(),
    })
}

/// Reads a JSONL file of objects, taking `id` and the named text field.
pub fn read_jsonl_field(path: &std::path::Path, field: &str) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |message: String| EvalError::Parse { line: i + 1, message };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = match &v["id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => return Err(parse_err("missing \"id\"".into())),
        };
        let value = v[field].as_str().ok_or_else(|| parse_err(format!("missing string field {field:?}")))?;
        out.push((id, value.to_string()));
    }
    Ok(out)
}

/// Joins predictions with references by id, in reference order.
pub fn join_by_id(predictions: Vec<(String, String)>, references: Vec<(String, String)>) -> Result<Vec<EvalPair>> {
    let mut preds: HashMap<String, String> = HashMap::new();
    for (id, p) in predictions {
        if preds.insert(id.clone(), p).is_some() {
            return Err(EvalError::DuplicateId(id));
        }
    }
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for (id, reference) in references {
        if !seen.insert(id.clone()) {
            return Err(EvalError::DuplicateId(id));
        }
        match preds.remove(&id) {
            Some(prediction) => pairs.push(EvalPair { id, prediction, reference }),
            None => missing.push(id),
        }
    }
    missing.extend(preds.into_keys());
    if !missing.is_empty() {
        missing.sort();
        return Err(EvalError::UnmatchedIds(missing));
    }
    Ok(pairs)
}
