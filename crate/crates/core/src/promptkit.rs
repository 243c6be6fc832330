//! Retrieval-conditioned prompt assembly, chat-template rendering and
//! supervision labels.
//!
//! A rendered prompt is, in order: the system turn (with the retrieved
//! reports appended when they are placed there), then the first user turn
//! holding the ECG token block, the retrieved reports when placed in the
//! query, and the first question, then the assistant answer and any later
//! turns. Only assistant answers and the end-of-turn token closing each
//! answer are supervised; every other position carries [`IGNORE_INDEX`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecg_bpe::ecg_token_string;
use crate::ragdb::RetrievedReport;

pub const RAG_HEADER: &str = "Retrieved diagnostic reports:\n";
pub const NOISE_PLACEHOLDER: &str = "--------------------------";
pub const IGNORE_INDEX: i64 = -100;
pub const DEFAULT_MAX_LEN: usize = 1024;
pub const MIN_MAX_LEN: usize = 16;
pub const DEFAULT_SYSTEM_PROMPT: &str =
    "You are an expert cardiologist. Interpret the 12-lead ECG and answer the user's questions.";

/// Structural tokens of the chat template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Begin,
    StartHeader,
    EndHeader,
    EndOfTurn,
    EcgStart,
    EcgEnd,
    Pad,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Begin,
        Special::StartHeader,
        Special::EndHeader,
        Special::EndOfTurn,
        Special::EcgStart,
        Special::EcgEnd,
        Special::Pad,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::Begin => "<|begin_of_text|>",
            Special::StartHeader => "<|start_header_id|>",
            Special::EndHeader => "<|end_header_id|>",
            Special::EndOfTurn => "<|eot_id|>",
            Special::EcgStart => "<ecg_start>",
            Special::EcgEnd => "<ecg_end>",
            Special::Pad => "<|pad|>",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("retrieval is enabled but no reports were retrieved")]
    NoReports,
    #[error("prompt needs {needed} tokens after truncation, limit is {max_len}")]
    ContextOverflowUnresolvable { needed: usize, max_len: usize },
    #[error("labels and log-probabilities differ in length ({labels} vs {logprobs})")]
    LengthMismatch { labels: usize, logprobs: usize },
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Where retrieved reports are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagLocation {
    SystemPrompt,
    UserQuery,
}

impl FromStr for RagLocation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "system" | "system_prompt" => Ok(Self::SystemPrompt),
            "user" | "user_query" => Ok(Self::UserQuery),
            other => Err(format!("unknown rag location {other:?} (expected system or user)")),
        }
    }
}

impl fmt::Display for RagLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SystemPrompt => "system",
            Self::UserQuery => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagOptions {
    pub enabled: bool,
    pub k: usize,
    pub location: RagLocation,
    /// Replace every report with [`noise_placeholder`](Self::noise_placeholder).
    pub noise: bool,
    pub noise_placeholder: String,
    /// With no reports (and no noise), return the conversation without a
    /// retrieval block instead of failing.
    pub fallback: bool,
}

impl Default for RagOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 1,
            location: RagLocation::SystemPrompt,
            noise: false,
            noise_placeholder: NOISE_PLACEHOLDER.into(),
            fallback: true,
        }
    }
}

impl RagOptions {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PromptError::InvalidOptions("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderOptions {
    pub max_len: usize,
    /// ECG tokens kept before any other truncation step.
    pub ecg_budget: Option<usize>,
    /// Pad to `max_len` with the pad token.
    pub pad: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { max_len: DEFAULT_MAX_LEN, ecg_budget: None, pad: true }
    }
}

/// One user query and, outside inference, the assistant's answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<String>,
}

impl Turn {
    pub fn new(user: impl Into<String>, assistant: Option<&str>) -> Self {
        Self { user: user.into(), assistant: assistant.map(str::to_string) }
    }
}

/// A dataset row: conversation turns about one ECG record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: String,
    pub record_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RagContext {
    pub location: RagLocation,
    /// Report texts as inserted (placeholders when noise is on), best first.
    pub reports: Vec<String>,
    pub entry_ids: Vec<u64>,
    pub noise: bool,
}

impl RagContext {
    pub fn text(&self) -> String {
        let lines: Vec<String> = self.reports.iter().enumerate().map(|(i, r)| format!("{}. {r}", i + 1)).collect();
        format!("{RAG_HEADER}{}", lines.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub system_text: String,
    pub rag: Option<RagContext>,
    /// ECG tokenizer ids.
    pub ecg_tokens: Vec<u32>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Validates that there is at least one turn and that only the final
    /// turn may lack an answer.
    pub fn new(system_text: impl Into<String>, ecg_tokens: Vec<u32>, turns: Vec<Turn>) -> Result<Self> {
        let conv = Self { system_text: system_text.into(), rag: None, ecg_tokens, turns };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(PromptError::InvalidConversation("no turns".into()));
        }
        let last = self.turns.len() - 1;
        if self.turns[..last].iter().any(|t| t.assistant.is_none()) {
            return Err(PromptError::InvalidConversation("only the final turn may lack a response".into()));
        }
        Ok(())
    }

    pub fn is_inference(&self) -> bool {
        self.turns.last().is_some_and(|t| t.assistant.is_none())
    }

    pub fn rag_text(&self) -> String {
        self.rag.as_ref().map(RagContext::text).unwrap_or_default()
    }

    pub fn effective_system_text(&self) -> String {
        match &self.rag {
            Some(rag) if rag.location == RagLocation::SystemPrompt => format!("{}\n\n{}", self.system_text, rag.text()),
            _ => self.system_text.clone(),
        }
    }

    pub fn effective_first_query(&self) -> String {
        match &self.rag {
            Some(rag) if rag.location == RagLocation::UserQuery => format!("{}\n\n{}", rag.text(), self.turns[0].user),
            _ => self.turns[0].user.clone(),
        }
    }
}

/// Inserts the top `opts.k` reports into a copy of `conv`.
pub fn assemble(conv: &Conversation, reports: &[RetrievedReport], opts: &RagOptions) -> Result<Conversation> {
    opts.validate()?;
    let mut out = conv.clone();
    if !opts.enabled {
        return Ok(out);
    }
    let top = &reports[..reports.len().min(opts.k)];
    let entry_ids: Vec<u64> = top.iter().map(|r| r.entry_id).collect();
    let texts: Vec<String> = if opts.noise {
        let n = if top.is_empty() { opts.k } else { top.len() };
        vec![opts.noise_placeholder.clone(); n]
    } else {
        top.iter().map(|r| r.report.clone()).collect()
    };
    if texts.is_empty() {
        if opts.fallback {
            out.rag = None;
            return Ok(out);
        }
        return Err(PromptError::NoReports);
    }
    out.rag = Some(RagContext { location: opts.location, reports: texts, entry_ids, noise: opts.noise });
    Ok(out)
}

/// Maps template pieces to model token ids.
pub trait TokenizerAdapter {
    fn encode_text(&self, text: &str) -> Vec<u32>;
    fn special(&self, token: Special) -> u32;
    /// Id reserved for ECG tokenizer id `ecg_token`; one id per ECG token.
    fn ecg(&self, ecg_token: u32) -> u32;
}

/// Byte-level stand-in: ids 0..256 are bytes, followed by the specials, then
/// the ECG tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const ECG_BASE: u32 = 256 + Special::ALL.len() as u32;
}

impl TokenizerAdapter for ByteTokenizer {
    fn encode_text(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn special(&self, token: Special) -> u32 {
        256 + Special::ALL.iter().position(|s| *s == token).unwrap() as u32
    }

    fn ecg(&self, ecg_token: u32) -> u32 {
        Self::ECG_BASE + ecg_token
    }
}

/// Role of a span of the flattened prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    Structural,
    System,
    Rag,
    Ecg,
    User,
    Assistant,
    /// End-of-turn token closing an assistant answer.
    AssistantEndOfTurn,
    Pad,
}

impl SpanRole {
    pub fn is_supervised(self) -> bool {
        matches!(self, SpanRole::Assistant | SpanRole::AssistantEndOfTurn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Span {
    pub role: SpanRole,
    /// Conversation turn the span belongs to.
    pub turn: Option<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TruncationReport {
    pub reports_dropped: usize,
    pub ecg_tokens_dropped: usize,
    pub turns_dropped: usize,
}

impl TruncationReport {
    pub fn any(&self) -> bool {
        self.reports_dropped + self.ecg_tokens_dropped + self.turns_dropped > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub roles: Vec<SpanRole>,
    pub spans: Vec<Span>,
    pub truncation: TruncationReport,
    /// Length before padding.
    pub content_len: usize,
}

impl PromptBundle {
    pub fn supervised_positions(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&t| self.labels[t] != IGNORE_INDEX).collect()
    }
}

enum Content<'a> {
    Text(&'a str),
    Owned(String),
    Special(Special),
    Ecg(&'a [u32]),
}

struct Piece<'a> {
    role: SpanRole,
    turn: Option<usize>,
    content: Content<'a>,
}

fn header(pieces: &mut Vec<Piece<'_>>, role: &'static str) {
    for content in [Content::Special(Special::StartHeader), Content::Text(role), Content::Special(Special::EndHeader), Content::Text("\n\n")] {
        pieces.push(Piece { role: SpanRole::Structural, turn: None, content });
    }
}

fn rag_pieces<'a>(pieces: &mut Vec<Piece<'a>>, rag: &'a RagContext) {
    pieces.push(Piece { role: SpanRole::Rag, turn: None, content: Content::Text(RAG_HEADER) });
    for (i, r) in rag.reports.iter().enumerate() {
        let sep = if i == 0 { "" } else { "\n" };
        pieces.push(Piece { role: SpanRole::Rag, turn: None, content: Content::Owned(format!("{sep}{}. {r}", i + 1)) });
    }
}

fn pieces(conv: &Conversation) -> Vec<Piece<'_>> {
    let structural = |content| Piece { role: SpanRole::Structural, turn: None, content };
    let mut p = vec![structural(Content::Special(Special::Begin))];
    header(&mut p, "system");
    p.push(Piece { role: SpanRole::System, turn: None, content: Content::Text(&conv.system_text) });
    let rag = conv.rag.as_ref().filter(|r| !r.reports.is_empty());
    if let Some(rag) = rag.filter(|r| r.location == RagLocation::SystemPrompt) {
        p.push(structural(Content::Text("\n\n")));
        rag_pieces(&mut p, rag);
    }
    p.push(structural(Content::Special(Special::EndOfTurn)));
    for (i, turn) in conv.turns.iter().enumerate() {
        header(&mut p, "user");
        if i == 0 {
            for content in [Content::Special(Special::EcgStart), Content::Ecg(&conv.ecg_tokens), Content::Special(Special::EcgEnd)] {
                p.push(Piece { role: SpanRole::Ecg, turn: Some(0), content });
            }
            p.push(structural(Content::Text("\n")));
            if let Some(rag) = rag.filter(|r| r.location == RagLocation::UserQuery) {
                rag_pieces(&mut p, rag);
                p.push(structural(Content::Text("\n\n")));
            }
        }
        p.push(Piece { role: SpanRole::User, turn: Some(i), content: Content::Text(&turn.user) });
        p.push(structural(Content::Special(Special::EndOfTurn)));
        header(&mut p, "assistant");
        if let Some(answer) = &turn.assistant {
            p.push(Piece { role: SpanRole::Assistant, turn: Some(i), content: Content::Text(answer) });
            p.push(Piece { role: SpanRole::AssistantEndOfTurn, turn: Some(i), content: Content::Special(Special::EndOfTurn) });
        }
    }
    p
}

fn piece_text(content: &Content<'_>, out: &mut String, abbreviate_ecg: Option<usize>) {
    match content {
        Content::Text(t) => out.push_str(t),
        Content::Owned(t) => out.push_str(t),
        Content::Special(s) => out.push_str(s.text()),
        Content::Ecg(ids) => {
            let shown = abbreviate_ecg.map_or(ids.len(), |n| n.min(ids.len()));
            for id in &ids[..shown] {
                out.push_str(&ecg_token_string(*id));
            }
            if shown < ids.len() {
                out.push_str(&format!("...(+{} ECG tokens)", ids.len() - shown));
            }
        }
    }
}

/// The conversation as template text, as sent to a text-generation backend.
/// An inference conversation ends with an open assistant header.
pub fn render_text(conv: &Conversation) -> String {
    let mut out = String::new();
    for piece in pieces(conv) {
        piece_text(&piece.content, &mut out, None);
    }
    out
}

/// As [`render_text`] with the ECG run shortened to its first `ecg_shown` tokens.
pub fn render_preview(conv: &Conversation, ecg_shown: usize) -> String {
    let mut out = String::new();
    for piece in pieces(conv) {
        piece_text(&piece.content, &mut out, Some(ecg_shown));
    }
    out
}

fn tokenize(conv: &Conversation, adapter: &dyn TokenizerAdapter) -> (Vec<u32>, Vec<SpanRole>, Vec<Span>) {
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    let mut spans: Vec<Span> = Vec::new();
    for piece in pieces(conv) {
        let start = ids.len();
        match &piece.content {
            Content::Text(t) => ids.extend(adapter.encode_text(t)),
            Content::Owned(t) => ids.extend(adapter.encode_text(t)),
            Content::Special(s) => ids.push(adapter.special(*s)),
            Content::Ecg(tokens) => ids.extend(tokens.iter().map(|t| adapter.ecg(*t))),
        }
        let end = ids.len();
        roles.resize(end, piece.role);
        match spans.last_mut() {
            Some(last) if last.role == piece.role && last.turn == piece.turn && last.end == start => last.end = end,
            _ if end > start => spans.push(Span { role: piece.role, turn: piece.turn, start, end }),
            _ => {}
        }
    }
    (ids, roles, spans)
}

fn token_len(conv: &Conversation, adapter: &dyn TokenizerAdapter) -> usize {
    tokenize(conv, adapter).0.len()
}

/// Shrinks `conv` to fit `opts.max_len`: the ECG budget is applied first,
/// then reports are dropped from the lowest rank, then ECG tokens are cut
/// from the tail, then the oldest turns are dropped. The current (final)
/// query is never removed.
pub fn fit(conv: &Conversation, adapter: &dyn TokenizerAdapter, opts: &RenderOptions) -> Result<(Conversation, TruncationReport)> {
    if opts.max_len < MIN_MAX_LEN {
        return Err(PromptError::InvalidOptions(format!("max_len must be at least {MIN_MAX_LEN}")));
    }
    conv.validate()?;
    let mut conv = conv.clone();
    let mut report = TruncationReport::default();
    if let Some(budget) = opts.ecg_budget {
        if conv.ecg_tokens.len() > budget {
            report.ecg_tokens_dropped += conv.ecg_tokens.len() - budget;
            conv.ecg_tokens.truncate(budget);
        }
    }
    let mut len = token_len(&conv, adapter);
    while len > opts.max_len {
        let Some(rag) = conv.rag.as_mut() else { break };
        rag.reports.pop();
        rag.entry_ids.truncate(rag.reports.len());
        report.reports_dropped += 1;
        if rag.reports.is_empty() {
            conv.rag = None;
        }
        len = token_len(&conv, adapter);
    }
    if len > opts.max_len && !conv.ecg_tokens.is_empty() {
        let cut = (len - opts.max_len).min(conv.ecg_tokens.len());
        conv.ecg_tokens.truncate(conv.ecg_tokens.len() - cut);
        report.ecg_tokens_dropped += cut;
        len = token_len(&conv, adapter);
    }
    while len > opts.max_len && conv.turns.len() > 1 {
        conv.turns.remove(0);
        report.turns_dropped += 1;
        len = token_len(&conv, adapter);
    }
    if len > opts.max_len {
        return Err(PromptError::ContextOverflowUnresolvable { needed: len, max_len: opts.max_len });
    }
    Ok((conv, report))
}

/// Fits, flattens and labels a conversation.
pub fn render_and_label(conv: &Conversation, adapter: &dyn TokenizerAdapter, opts: &RenderOptions) -> Result<PromptBundle> {
    let (fitted, truncation) = fit(conv, adapter, opts)?;
    let (mut input_ids, mut roles, mut spans) = tokenize(&fitted, adapter);
    let content_len = input_ids.len();
    if opts.pad && content_len < opts.max_len {
        input_ids.resize(opts.max_len, adapter.special(Special::Pad));
        roles.resize(opts.max_len, SpanRole::Pad);
        spans.push(Span { role: SpanRole::Pad, turn: None, start: content_len, end: opts.max_len });
    }
    let labels = input_ids
        .iter()
        .zip(&roles)
        .map(|(id, role)| if role.is_supervised() { *id as i64 } else { IGNORE_INDEX })
        .collect();
    Ok(PromptBundle { input_ids, labels, roles, spans, truncation, content_len })
}

/// `-sum log p(y_t)` over supervised positions.
pub fn masked_nll(labels: &[i64], logprobs: &[f64]) -> Result<f64> {
    if labels.len() != logprobs.len() {
        return Err(PromptError::LengthMismatch { labels: labels.len(), logprobs: logprobs.len() });
    }
    Ok(-labels.iter().zip(logprobs).filter(|(l, _)| **l != IGNORE_INDEX).map(|(_, lp)| lp).sum::<f64>())
}

/// Retrieval settings recorded with an exported sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRag {
    pub enabled: bool,
    pub k: usize,
    pub location: RagLocation,
    pub noise: bool,
    pub entry_ids: Vec<u64>,
}

/// One line of a training (with labels) or inference (without) export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub record_id: String,
    pub input_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    pub text_preview: String,
    pub rag: ExportRag,
}
