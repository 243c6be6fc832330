//! Text-generation backends: a blocking HTTP client for an external
//! endpoint, deterministic in-process mocks, and a local HTTP server that
//! exposes a mock over the same wire format.
//!
//! Wire format: `POST` a JSON [`GenRequest`] to the endpoint URL; the reply is
//! a JSON [`GenResponse`]. HTTP 413, or an error body mentioning a context
//! overflow, maps to [`GenError::Overflow`].

use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::RAG_HEADER;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("backend context overflow: {0}")]
    Overflow(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub type Result<T> = std::result::Result<T, GenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), max_new_tokens: 256, temperature: 0.0, stop: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenError::InvalidRequest(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub latency_ms: u64,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse>;
}

/// Deterministic stand-in backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockMode {
    /// Returns the last `max_new_tokens` characters of the prompt.
    Echo,
    /// Always returns the given text.
    Fixed(String),
    /// Returns the first numbered retrieved report in the prompt, or an
    /// empty string when the prompt has none.
    RetrievalEcho,
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "echo" => Ok(Self::Echo),
            "retrieval_echo" | "retrieval-echo" => Ok(Self::RetrievalEcho),
            _ => match s.strip_prefix("fixed:") {
                Some(text) => Ok(Self::Fixed(text.to_string())),
                None => Err(format!("unknown mock mode {s:?} (expected echo, retrieval_echo or fixed:<text>)")),
            },
        }
    }
}

/// First numbered report after the retrieval header, up to the end of its
/// line or the next template token.
pub fn first_retrieved_report(prompt: &str) -> Option<&str> {
    let after = &prompt[prompt.find(RAG_HEADER)? + RAG_HEADER.len()..];
    let line = after.strip_prefix("1. ")?;
    let end = [line.find('\n'), line.find("<|")].into_iter().flatten().min().unwrap_or(line.len());
    Some(&line[..end])
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub mode: MockMode,
}

impl MockGenerator {
    pub fn new(mode: MockMode) -> Self {
        Self { mode }
    }

    fn respond(&self, req: &GenRequest) -> String {
        match &self.mode {
            MockMode::Echo => {
                let n = req.prompt.chars().count();
                req.prompt.chars().skip(n.saturating_sub(req.max_new_tokens as usize)).collect()
            }
            MockMode::Fixed(text) => text.clone(),
            MockMode::RetrievalEcho => first_retrieved_report(&req.prompt).unwrap_or_default().to_string(),
        }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse> {
        req.validate()?;
        Ok(GenResponse { text: self.respond(req), logprobs: None, latency_ms: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff: Duration::from_millis(250),
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpGenerator {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

enum Attempt {
    Done(Result<GenResponse>),
    Retry(String),
}

fn is_overflow_message(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("overflow") || lower.contains("context length") || lower.contains("too long")
}

impl HttpGenerator {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenError::Transport { attempts: 0, message: e.to_string() })?;
        let limit = config.max_in_flight.max(1);
        Ok(Self { config, client, in_flight: InFlight { active: Mutex::new(0), freed: Condvar::new(), limit } })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn attempt(&self, req: &GenRequest) -> Attempt {
        let mut builder = self.client.post(&self.config.url).json(req);
        if let Some(token) = &self.config.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.as_u16() == 413 {
            return Attempt::Done(Err(GenError::Overflow(body)));
        }
        if status.is_server_error() {
            if is_overflow_message(&body) {
                return Attempt::Done(Err(GenError::Overflow(body)));
            }
            return Attempt::Retry(format!("HTTP {status}: {body}"));
        }
        if !status.is_success() {
            if is_overflow_message(&body) {
                return Attempt::Done(Err(GenError::Overflow(body)));
            }
            return Attempt::Done(Err(GenError::BadResponse(format!("HTTP {status}: {body}"))));
        }
        Attempt::Done(serde_json::from_str::<GenResponse>(&body).map_err(|e| GenError::BadResponse(e.to_string())))
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse> {
        req.validate()?;
        let _permit = self.in_flight.acquire();
        let start = Instant::now();
        let attempts = self.config.max_attempts.max(1);
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(req) {
                Attempt::Done(result) => {
                    return result.map(|mut r| {
                        r.latency_ms = start.elapsed().as_millis() as u64;
                        r
                    })
                }
                Attempt::Retry(message) => last = message,
            }
            if attempt < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(GenError::Transport { attempts, message: last })
    }
}

/// Behaviour of a [`MockServer`] besides its generation mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockServerOptions {
    /// Answer the first `n` requests with `fail_status` instead.
    pub fail_first: usize,
    pub fail_status: u16,
}

/// Local HTTP server speaking the wire format. Shuts down on drop.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    handle: Option<JoinHandle<()>>,
    requests: Arc<Mutex<Vec<GenRequest>>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, mode: MockMode, options: MockServerOptions) -> std::io::Result<Self> {
        let server = Arc::new(tiny_http::Server::http(addr).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server is not bound to an IP address"))?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let generator = MockGenerator::new(mode);
        let handle = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                let mut served = 0usize;
                for mut request in server.incoming_requests() {
                    served += 1;
                    let mut body = String::new();
                    let (status, payload) = if request.as_reader().read_to_string(&mut body).is_err() {
                        (400, r#"{"error":"unreadable body"}"#.to_string())
                    } else if served <= options.fail_first {
                        (options.fail_status, r#"{"error":"injected failure"}"#.to_string())
                    } else {
                        match serde_json::from_str::<GenRequest>(&body) {
                            Ok(req) => {
                                requests.lock().unwrap().push(req.clone());
                                match generator.generate(&req) {
                                    Ok(resp) => (200, serde_json::to_string(&resp).expect("response serializes")),
                                    Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
                                }
                            }
                            Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
                        }
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                    let response = tiny_http::Response::from_string(payload).with_status_code(status).with_header(header);
                    let _ = request.respond(response);
                }
            })
        };
        Ok(Self { server, addr, handle: Some(handle), requests })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/generate", self.addr)
    }

    /// Requests received so far, as parsed.
    pub fn received(&self) -> Vec<GenRequest> {
        self.requests.lock().unwrap().clone()
    }

    /// Serves until the process is terminated.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
