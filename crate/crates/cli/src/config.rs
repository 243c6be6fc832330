//! Run settings shared by the subcommands.
//!
//! Sources are layered: built-in defaults, then a `key = value` config file,
//! then `ECGRAG_*` environment variables, then command-line flags. Keys use
//! the flag names with `-` or `_` interchangeably (`rag-location`,
//! `RAG_LOCATION`).

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ecgrag::promptkit::RagLocation;
use ecgrag::ragdb::QueryMode;

pub const ENV_PREFIX: &str = "ECGRAG_";
/// ECG tokens kept per prompt by default, so that retrieved reports fit in
/// the default context length.
pub const DEFAULT_ECG_BUDGET: usize = 256;

/// Every key accepted in config files and `ECGRAG_*` variables.
pub const KEYS: &[&str] = &[
    "rag",
    "k",
    "rag_location",
    "noise",
    "nprobe",
    "mode",
    "seed",
    "endpoint",
    "max_len",
    "ecg_budget",
    "workers",
    "exclude_self",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub rag: bool,
    pub k: usize,
    pub rag_location: RagLocation,
    pub noise: bool,
    /// `None` uses the database default.
    pub nprobe: Option<usize>,
    pub mode: QueryMode,
    pub seed: u64,
    /// URL of a generation endpoint, or `mock:<mode>` for an in-process mock.
    pub endpoint: Option<String>,
    pub max_len: usize,
    pub ecg_budget: Option<usize>,
    pub workers: usize,
    /// Drop hits from the queried record itself.
    pub exclude_self: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            rag: true,
            k: 1,
            rag_location: RagLocation::SystemPrompt,
            noise: false,
            nprobe: None,
            mode: QueryMode::Both,
            seed: 0,
            endpoint: None,
            max_len: ecgrag::promptkit::DEFAULT_MAX_LEN,
            ecg_budget: Some(DEFAULT_ECG_BUDGET),
            workers: 2,
            exclude_self: false,
        }
    }
}

pub fn parse_switch(value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => bail!("expected on/off, got {other:?}"),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

/// `none`/`off`/empty disables an optional numeric setting.
fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").to_ascii_lowercase().replace('-', "_")
}

impl Settings {
    /// Applies one `key = value` assignment; on error `self` is unchanged.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.assign(key, value)?;
        *self = next;
        Ok(())
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        match key.as_str() {
            "rag" => self.rag = parse_switch(value)?,
            "k" => self.k = parse(&key, value)?,
            "rag_location" => self.rag_location = parse(&key, value)?,
            "noise" => self.noise = parse_switch(value)?,
            "nprobe" => self.nprobe = parse_optional(&key, value)?,
            "mode" => self.mode = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "endpoint" => self.endpoint = Some(value.trim().to_string()).filter(|s| !s.is_empty()),
            "max_len" => self.max_len = parse(&key, value)?,
            "ecg_budget" => self.ecg_budget = parse_optional(&key, value)?,
            "workers" => self.workers = parse(&key, value)?,
            "exclude_self" => self.exclude_self = parse_switch(value)?,
            _ => bail!("unknown setting {key:?} (known: {})", KEYS.join(", ")),
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", i + 1))?;
            self.set(key, value).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut relevant: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (normalize_key(rest), v)))
            .filter(|(k, _)| KEYS.contains(&k.as_str()))
            .collect();
        relevant.sort();
        for (k, v) in relevant {
            self.set(&k, &v).with_context(|| format!("environment variable {ENV_PREFIX}{}", k.to_ascii_uppercase()))?;
        }
        Ok(())
    }

    /// Defaults, then `config`, then environment, then `flags`.
    pub fn resolve<I>(config: Option<&Path>, env: I, flags: &[(&str, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut s = Self::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            s.apply_config_text(&text).with_context(|| format!("config {}", path.display()))?;
        }
        s.apply_env(env)?;
        for (k, v) in flags {
            s.set(k, v).with_context(|| format!("flag --{}", k.replace('_', "-")))?;
        }
        Ok(s)
    }

    pub fn rag_options(&self) -> ecgrag::promptkit::RagOptions {
        ecgrag::promptkit::RagOptions {
            enabled: self.rag,
            k: self.k,
            location: self.rag_location,
            noise: self.noise,
            ..Default::default()
        }
    }

    pub fn render_options(&self, pad: bool) -> ecgrag::promptkit::RenderOptions {
        ecgrag::promptkit::RenderOptions { max_len: self.max_len, ecg_budget: self.ecg_budget, pad }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn precedence_defaults_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nk = 5\nrag-location = user\nnoise = on\nseed=3\n").unwrap();

        let s = Settings::resolve(Some(&path), env(&[]), &[]).unwrap();
        assert_eq!((s.k, s.rag_location, s.noise, s.seed), (5, RagLocation::UserQuery, true, 3));
        assert_eq!(s.max_len, 1024);

        let s = Settings::resolve(Some(&path), env(&[("ECGRAG_K", "10"), ("ECGRAG_NOISE", "off"), ("HOME", "/x")]), &[]).unwrap();
        assert_eq!((s.k, s.noise, s.seed), (10, false, 3));

        let s = Settings::resolve(Some(&path), env(&[("ECGRAG_K", "10")]), &[("k", "1".into())]).unwrap();
        assert_eq!(s.k, 1);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = Settings::default();
        assert!(s.set("k", "0").is_err());
        assert!(s.set("mode", "nope").is_err());
        assert!(s.set("bogus", "1").is_err());
        assert!(s.apply_config_text("no equals sign").is_err());
        s.set("nprobe", "none").unwrap();
        assert_eq!(s.nprobe, None);
        s.set("--max-len", "512").unwrap();
        assert_eq!(s.max_len, 512);
    }
}
