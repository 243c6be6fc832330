//! Symbolization of ECG signals and a byte-pair-encoding tokenizer over the
//! resulting symbol streams.
//!
//! Token ids `0..alphabet_size` are the base symbols; merge `i` creates token
//! `alphabet_size + i`. Pairs never span two corpus sequences.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EcgRecord;

pub const DEFAULT_ALPHABET: u32 = 26;
pub const DEFAULT_MERGES: usize = 3500;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutOfRange { symbol: u32, alphabet: u32 },
    #[error("token id {0} not in vocabulary")]
    UnknownToken(u32),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BpeError>;

/// Joint min-max normalization of all leads followed by uniform binning.
/// Leads are concatenated lead-major. A constant record maps to all zeros.
pub fn quantize(record: &EcgRecord, alphabet_size: u32) -> Vec<u32> {
    quantize_leads(&record.data, alphabet_size)
}

pub fn quantize_leads(leads: &[Vec<f64>], alphabet_size: u32) -> Vec<u32> {
    let values = leads.iter().flatten();
    let (lo, hi) = values.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if !range.is_finite() || range <= 0.0 {
        return vec![0; leads.iter().map(Vec::len).sum()];
    }
    let top = alphabet_size.saturating_sub(1);
    values
        .map(|v| {
            let bin = ((v - lo) / range * alphabet_size as f64).floor();
            (bin.max(0.0) as u32).min(top)
        })
        .collect()
}

/// Learned merges over a base alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    pub alphabet_size: u32,
    pub merges: Vec<(u32, u32)>,
    token_strings: Vec<Vec<u32>>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    alphabet_size: u32,
    merges: Vec<[u32; 2]>,
}

impl BpeVocab {
    /// Builds and validates a vocabulary from an ordered merge list.
    pub fn new(alphabet_size: u32, merges: Vec<(u32, u32)>) -> Result<Self> {
        if alphabet_size == 0 {
            return Err(BpeError::InvalidVocab("alphabet size must be positive".into()));
        }
        let mut token_strings: Vec<Vec<u32>> = (0..alphabet_size).map(|s| vec![s]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let defined = token_strings.len() as u32;
            if l >= defined || r >= defined {
                return Err(BpeError::InvalidVocab(format!("merge {rank} ({l}, {r}) references an undefined token")));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(BpeError::InvalidVocab(format!("duplicate merge ({l}, {r})")));
            }
            let mut s = token_strings[l as usize].clone();
            s.extend_from_slice(&token_strings[r as usize]);
            token_strings.push(s);
        }
        Ok(Self { alphabet_size, merges, token_strings, ranks })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_strings.len()
    }

    /// Symbols spelled by `token`.
    pub fn token_string(&self, token: u32) -> Option<&[u32]> {
        self.token_strings.get(token as usize).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile { alphabet_size: self.alphabet_size, merges: self.merges.iter().map(|&(l, r)| [l, r]).collect() };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.alphabet_size, file.merges.into_iter().map(|[l, r]| (l, r)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Token ids of one encoded record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_record_id: String,
}

/// Prompt rendering of an ECG token.
pub fn ecg_token_string(id: u32) -> String {
    format!("<ecg_{id}>")
}

const NONE: u32 = u32::MAX;

fn key(l: u32, r: u32) -> u64 {
    ((l as u64) << 32) | r as u64
}

fn unkey(k: u64) -> (u32, u32) {
    ((k >> 32) as u32, k as u32)
}

/// Corpus flattened into one array of nodes with per-sequence links.
struct Workspace {
    sym: Vec<u32>,
    next: Vec<u32>,
    prev: Vec<u32>,
    alive: Vec<bool>,
    counts: HashMap<u64, i64>,
    positions: HashMap<u64, Vec<u32>>,
}

impl Workspace {
    fn new(corpus: &[Vec<u32>]) -> Self {
        let total: usize = corpus.iter().map(Vec::len).sum();
        let mut ws = Workspace {
            sym: Vec::with_capacity(total),
            next: Vec::with_capacity(total),
            prev: Vec::with_capacity(total),
            alive: vec![true; total],
            counts: HashMap::new(),
            positions: HashMap::new(),
        };
        for seq in corpus {
            let start = ws.sym.len() as u32;
            for (i, &s) in seq.iter().enumerate() {
                let idx = start + i as u32;
                ws.sym.push(s);
                ws.prev.push(if i == 0 { NONE } else { idx - 1 });
                ws.next.push(if i + 1 == seq.len() { NONE } else { idx + 1 });
            }
        }
        for i in 0..ws.sym.len() as u32 {
            if ws.next[i as usize] != NONE {
                ws.add_pair(i, 1);
            }
        }
        ws
    }

    fn pair_at(&self, i: u32) -> u64 {
        key(self.sym[i as usize], self.sym[self.next[i as usize] as usize])
    }

    fn add_pair(&mut self, i: u32, delta: i64) {
        let k = self.pair_at(i);
        *self.counts.entry(k).or_insert(0) += delta;
        if delta > 0 {
            self.positions.entry(k).or_default().push(i);
        }
    }

    /// Merges every current occurrence of `pair` left to right; returns the
    /// pairs whose counts changed.
    fn merge(&mut self, pair: u64, new_token: u32) -> HashSet<u64> {
        let (l, r) = unkey(pair);
        let mut touched = HashSet::new();
        let mut positions = self.positions.remove(&pair).unwrap_or_default();
        positions.sort_unstable();
        positions.dedup();
        for i in positions {
            let iu = i as usize;
            if !self.alive[iu] || self.sym[iu] != l {
                continue;
            }
            let j = self.next[iu];
            if j == NONE || self.sym[j as usize] != r {
                continue;
            }
            let p = self.prev[iu];
            let n = self.next[j as usize];
            if p != NONE {
                touched.insert(self.pair_at(p));
                self.add_pair(p, -1);
            }
            self.add_pair(i, -1);
            if n != NONE {
                touched.insert(self.pair_at(j));
                self.add_pair(j, -1);
            }
            self.sym[iu] = new_token;
            self.alive[j as usize] = false;
            self.next[iu] = n;
            if n != NONE {
                self.prev[n as usize] = i;
                self.add_pair(i, 1);
                touched.insert(self.pair_at(i));
            }
            if p != NONE {
                self.add_pair(p, 1);
                touched.insert(self.pair_at(p));
            }
        }
        self.counts.remove(&pair);
        touched.remove(&pair);
        touched
    }
}

/// Learns up to `num_merges` merges. Each step merges the most frequent
/// adjacent pair (ties to the smallest `(left, right)`); training stops early
/// once no pair occurs at least twice.
pub fn train_bpe(corpus: &[Vec<u32>], alphabet_size: u32, num_merges: usize) -> Result<BpeVocab> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(BpeError::EmptyCorpus);
    }
    for s in corpus.iter().flatten() {
        if *s >= alphabet_size {
            return Err(BpeError::SymbolOutOfRange { symbol: *s, alphabet: alphabet_size });
        }
    }
    let mut ws = Workspace::new(corpus);
    let mut heap: BinaryHeap<(i64, Reverse<u64>)> = ws.counts.iter().map(|(k, c)| (*c, Reverse(*k))).collect();
    let mut merges = Vec::with_capacity(num_merges.min(1 << 16));
    while merges.len() < num_merges {
        let Some((count, Reverse(pair))) = heap.pop() else { break };
        if ws.counts.get(&pair).copied() != Some(count) {
            continue;
        }
        if count < 2 {
            break;
        }
        let new_token = alphabet_size + merges.len() as u32;
        merges.push(unkey(pair));
        for k in ws.merge(pair, new_token) {
            if let Some(&c) = ws.counts.get(&k) {
                if c > 0 {
                    heap.push((c, Reverse(k)));
                }
            }
        }
    }
    BpeVocab::new(alphabet_size, merges)
}

/// Applies the learned merges in rank order, each left to right.
pub fn encode(symbols: &[u32], vocab: &BpeVocab) -> Result<Vec<u32>> {
    for s in symbols {
        if *s >= vocab.alphabet_size {
            return Err(BpeError::SymbolOutOfRange { symbol: *s, alphabet: vocab.alphabet_size });
        }
    }
    let n = symbols.len();
    if n < 2 || vocab.merges.is_empty() {
        return Ok(symbols.to_vec());
    }
    let mut sym = symbols.to_vec();
    let mut next: Vec<u32> = (1..=n as u32).collect();
    next[n - 1] = NONE;
    let mut prev: Vec<u32> = (0..n as u32).map(|i| i.wrapping_sub(1)).collect();
    prev[0] = NONE;
    let mut alive = vec![true; n];

    let rank_at = |sym: &[u32], next: &[u32], i: usize| -> Option<u32> {
        let j = next[i];
        (j != NONE).then(|| vocab.ranks.get(&(sym[i], sym[j as usize])).copied()).flatten()
    };
    let mut heap: BinaryHeap<Reverse<(u32, u32)>> =
        (0..n).filter_map(|i| rank_at(&sym, &next, i).map(|r| Reverse((r, i as u32)))).collect();
    while let Some(Reverse((rank, i))) = heap.pop() {
        let iu = i as usize;
        if !alive[iu] || rank_at(&sym, &next, iu) != Some(rank) {
            continue;
        }
        let j = next[iu] as usize;
        sym[iu] = vocab.alphabet_size + rank;
        alive[j] = false;
        next[iu] = next[j];
        if next[j] != NONE {
            prev[next[j] as usize] = i;
        }
        if let Some(r) = rank_at(&sym, &next, iu) {
            heap.push(Reverse((r, i)));
        }
        let p = prev[iu];
        if p != NONE {
            if let Some(r) = rank_at(&sym, &next, p as usize) {
                heap.push(Reverse((r, p)));
            }
        }
    }
    let mut out = Vec::new();
    let mut i = 0u32;
    while i != NONE {
        out.push(sym[i as usize]);
        i = next[i as usize];
    }
    Ok(out)
}

pub fn encode_record(record: &EcgRecord, vocab: &BpeVocab) -> Result<TokenSequence> {
    let ids = encode(&quantize(record, vocab.alphabet_size), vocab)?;
    Ok(TokenSequence { ids, source_record_id: record.record_id.clone() })
}

pub fn decode(tokens: &[u32], vocab: &BpeVocab) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    for t in tokens {
        out.extend_from_slice(vocab.token_string(*t).ok_or(BpeError::UnknownToken(*t))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recounts every pair from scratch at each step.
    fn naive_train(corpus: &[Vec<u32>], alphabet: u32, num_merges: usize) -> Vec<(u32, u32)> {
        let mut seqs = corpus.to_vec();
        let mut merges = vec![];
        while merges.len() < num_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for s in &seqs {
                for w in s.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
            let Some((&pair, &c)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else { break };
            if c < 2 {
                break;
            }
            let new = alphabet + merges.len() as u32;
            merges.push(pair);
            seqs = seqs.iter().map(|s| merge_naive(s, pair, new)).collect();
        }
        merges
    }

    fn merge_naive(s: &[u32], pair: (u32, u32), new: u32) -> Vec<u32> {
        let mut out = vec![];
        let mut i = 0;
        while i < s.len() {
            if i + 1 < s.len() && (s[i], s[i + 1]) == pair {
                out.push(new);
                i += 2;
            } else {
                out.push(s[i]);
                i += 1;
            }
        }
        out
    }

    fn naive_encode(s: &[u32], vocab: &BpeVocab) -> Vec<u32> {
        let mut cur = s.to_vec();
        for (rank, &pair) in vocab.merges.iter().enumerate() {
            cur = merge_naive(&cur, pair, vocab.alphabet_size + rank as u32);
        }
        cur
    }

    fn letters(s: &str) -> Vec<u32> {
        s.bytes().map(|b| (b - b'a') as u32).collect()
    }

    #[test]
    fn quantize_endpoints_and_ramp() {
        let two = quantize_leads(&[vec![-1.0, 3.0]], 26);
        assert_eq!(two, vec![0, 25]);
        let ramp: Vec<f64> = (0..26).map(|i| i as f64 / 25.0).collect();
        assert_eq!(quantize_leads(&[ramp], 26), (0..26).collect::<Vec<_>>());
        assert_eq!(quantize_leads(&[vec![4.0; 5], vec![4.0; 5]], 26), vec![0; 10]);
    }

    #[test]
    fn quantize_is_joint_and_lead_major() {
        let q = quantize_leads(&[vec![0.0, 0.5], vec![1.0, 0.25]], 4);
        assert_eq!(q, vec![0, 2, 3, 1]);
    }

    #[test]
    fn aabaab() {
        let vocab = train_bpe(&[letters("aabaab")], 26, 1).unwrap();
        assert_eq!(vocab.merges, vec![(0, 0)]);
        assert_eq!(encode(&letters("aabaab"), &vocab).unwrap(), vec![26, 1, 26, 1]);
    }

    #[test]
    fn nothing_to_merge() {
        let vocab = train_bpe(&[letters("abcdef")], 26, 10).unwrap();
        assert!(vocab.merges.is_empty());
        let vocab = train_bpe(&[letters("aaaa")], 26, 0).unwrap();
        assert_eq!(vocab.vocab_size(), 26);
        assert!(matches!(train_bpe(&[], 26, 1), Err(BpeError::EmptyCorpus)));
        assert!(matches!(train_bpe(&[vec![]], 26, 1), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn pairs_do_not_cross_sequences() {
        // "ab" only occurs across the boundary
        let vocab = train_bpe(&[letters("a"), letters("b"), letters("a"), letters("b")], 26, 5).unwrap();
        assert!(vocab.merges.is_empty());
    }

    #[test]
    fn overlapping_run() {
        let vocab = train_bpe(&[letters("aaaaa")], 26, 3).unwrap();
        assert_eq!(vocab.merges, naive_train(&[letters("aaaaa")], 26, 3));
        assert_eq!(encode(&letters("aaaaa"), &vocab).unwrap(), naive_encode(&letters("aaaaa"), &vocab));
    }

    #[test]
    fn incremental_matches_naive_retrain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for alphabet in [2u32, 3, 5, 26] {
            let corpus: Vec<Vec<u32>> = (0..6)
                .map(|_| {
                    let len = rng.random_range(0..200);
                    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
                })
                .collect();
            if corpus.iter().all(Vec::is_empty) {
                continue;
            }
            let fast = train_bpe(&corpus, alphabet, 60).unwrap();
            assert_eq!(fast.merges, naive_train(&corpus, alphabet, 60), "alphabet {alphabet}");
            for s in &corpus {
                assert_eq!(encode(s, &fast).unwrap(), naive_encode(s, &fast));
            }
        }
    }

    #[test]
    fn encode_errors_and_trivial_cases() {
        let vocab = train_bpe(&[letters("aabaab")], 26, 1).unwrap();
        assert!(encode(&[], &vocab).unwrap().is_empty());
        assert_eq!(encode(&letters("xyz"), &vocab).unwrap(), letters("xyz"));
        assert!(matches!(encode(&[26], &vocab), Err(BpeError::SymbolOutOfRange { symbol: 26, alphabet: 26 })));
        assert!(matches!(decode(&[27], &vocab), Err(BpeError::UnknownToken(27))));
        assert!(decode(&[], &vocab).unwrap().is_empty());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let vocab = train_bpe(&[letters("abababcdcdcd")], 26, 4).unwrap();
        let json = vocab.to_json();
        assert_eq!(BpeVocab::from_json(&json).unwrap(), vocab);
        assert!(BpeVocab::from_json(r#"{"alphabet_size":2,"merges":[[0,5]]}"#).is_err());
        assert!(BpeVocab::from_json(r#"{"alphabet_size":2,"merges":[[0,1],[0,1]]}"#).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![letters("abcabcabdabd"), letters("ddddabab")];
        assert_eq!(train_bpe(&corpus, 26, 20).unwrap().to_json(), train_bpe(&corpus, 26, 20).unwrap().to_json());
    }

    #[test]
    fn token_rendering() {
        assert_eq!(ecg_token_string(7), "<ecg_7>");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_and_compression(
                corpus in prop::collection::vec(prop::collection::vec(0u32..4, 0..80), 1..5),
                probe in prop::collection::vec(0u32..4, 0..120),
                merges in 0usize..30,
            ) {
                prop_assume!(corpus.iter().any(|s| !s.is_empty()));
                let vocab = train_bpe(&corpus, 4, merges).unwrap();
                let enc = encode(&probe, &vocab).unwrap();
                prop_assert!(enc.len() <= probe.len());
                prop_assert!(enc.iter().all(|t| (*t as usize) < vocab.vocab_size()));
                prop_assert_eq!(decode(&enc, &vocab).unwrap(), probe);
            }
        }
    }
}
