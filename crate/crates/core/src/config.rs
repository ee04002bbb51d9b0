//! Pipeline configuration.
//!
//! Sources, lowest to highest precedence: built-in defaults, a flat
//! `key = value` file, `RAG_<KEY>` environment variables, command-line
//! flags. Every source uses the same key names.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::generation::RemoteConfig;
use crate::multihop::HopConfig;

pub const API_KEY_ENV: &str = "RAG_LLM_API_KEY";

const KEYS: &[&str] = &[
    "dims",
    "vocab_buckets",
    "seed",
    "k",
    "hops",
    "per_hop_k",
    "alpha_mix",
    "dedupe",
    "temperature",
    "backend",
    "mode",
    "chunk_size",
    "overlap",
    "max_chunks",
    "llm_base_url",
    "llm_model",
    "llm_timeout_secs",
    "llm_max_retries",
    "llm_temperature",
    "llm_max_tokens",
    "llm_max_in_flight",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {key:?} ({origin})")]
    UnknownKey { key: String, origin: String },
    #[error("config key {key:?} expects {expected}, got {value:?} ({origin})")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        value: String,
        origin: String,
    },
    #[error("config file line {line} is not `key = value`")]
    Malformed { line: usize },
    #[error("cannot read config file {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Extractive,
    Remote,
}

impl FromStr for BackendKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "extractive" => Ok(Self::Extractive),
            "remote" => Ok(Self::Remote),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    RetrievalOnly,
    GenerationOnly,
}

impl FromStr for Mode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Self::Full),
            "retrieval_only" => Ok(Self::RetrievalOnly),
            "generation_only" => Ok(Self::GenerationOnly),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::RetrievalOnly => "retrieval_only",
            Mode::GenerationOnly => "generation_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dims: usize,
    pub vocab_buckets: usize,
    pub seed: u64,
    pub k: usize,
    /// Hop settings; `hop.temperature` is also used for the initial fusion.
    pub hop: HopConfig,
    pub backend: BackendKind,
    pub remote: RemoteConfig,
    pub mode: Mode,
    pub chunk_size: usize,
    pub overlap: usize,
    pub max_chunks: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dims: 256,
            vocab_buckets: 65_536,
            seed: 0,
            k: 5,
            hop: HopConfig::default(),
            backend: BackendKind::Extractive,
            remote: RemoteConfig::default(),
            mode: Mode::Full,
            chunk_size: 128,
            overlap: 16,
            max_chunks: 5,
        }
    }
}

fn parse<T: FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
    origin: &str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::TypeMismatch {
        key: key.to_string(),
        expected,
        value: value.to_string(),
        origin: origin.to_string(),
    })
}

fn parse_bool(key: &str, value: &str, origin: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::TypeMismatch {
            key: key.to_string(),
            expected: "a boolean",
            value: value.to_string(),
            origin: origin.to_string(),
        }),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        const COUNT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "dims" => self.dims = parse(key, value, COUNT, origin)?,
            "vocab_buckets" => self.vocab_buckets = parse(key, value, COUNT, origin)?,
            "seed" => self.seed = parse(key, value, COUNT, origin)?,
            "k" => self.k = parse(key, value, COUNT, origin)?,
            "hops" => self.hop.hops = parse(key, value, COUNT, origin)?,
            "per_hop_k" => self.hop.per_hop_k = parse(key, value, COUNT, origin)?,
            "alpha_mix" => self.hop.alpha_mix = parse(key, value, REAL, origin)?,
            "dedupe" => self.hop.dedupe = parse_bool(key, value, origin)?,
            "temperature" => self.hop.temperature = parse(key, value, REAL, origin)?,
            "backend" => self.backend = parse(key, value, "one of extractive|remote", origin)?,
            "mode" => {
                self.mode = parse(
                    key,
                    value,
                    "one of full|retrieval_only|generation_only",
                    origin,
                )?
            }
            "chunk_size" => self.chunk_size = parse(key, value, COUNT, origin)?,
            "overlap" => self.overlap = parse(key, value, COUNT, origin)?,
            "max_chunks" => self.max_chunks = parse(key, value, COUNT, origin)?,
            "llm_base_url" => self.remote.base_url = value.trim().to_string(),
            "llm_model" => self.remote.model = value.trim().to_string(),
            "llm_timeout_secs" => {
                let secs: f64 = parse(key, value, REAL, origin)?;
                if !(secs.is_finite() && secs > 0.0) {
                    return Err(ConfigError::Invalid("llm_timeout_secs must be > 0".into()));
                }
                self.remote.timeout = Duration::from_secs_f64(secs);
            }
            "llm_max_retries" => self.remote.max_retries = parse(key, value, COUNT, origin)?,
            "llm_temperature" => self.remote.temperature = parse(key, value, REAL, origin)?,
            "llm_max_tokens" => self.remote.max_tokens = parse(key, value, COUNT, origin)?,
            "llm_max_in_flight" => self.remote.max_in_flight = parse(key, value, COUNT, origin)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    origin: origin.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 {
            return fail("k must be ≥ 1");
        }
        if self.dims == 0 {
            return fail("dims must be ≥ 1");
        }
        if self.vocab_buckets == 0 {
            return fail("vocab_buckets must be ≥ 1");
        }
        if self.chunk_size == 0 {
            return fail("chunk_size must be ≥ 1");
        }
        if self.overlap >= self.chunk_size {
            return fail("overlap must be smaller than chunk_size");
        }
        if self.max_chunks == 0 {
            return fail("max_chunks must be ≥ 1");
        }
        self.hop
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(contents: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in contents.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Malformed { line: i + 1 })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Malformed { line: i + 1 });
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn env_var_name(key: &str) -> String {
    format!("RAG_{}", key.to_ascii_uppercase())
}

/// `RAG_*` variables from the process environment.
pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars()
        .filter(|(k, _)| k.starts_with("RAG_"))
        .collect()
}

/// Layer the sources over the defaults and validate the result.
pub fn load_config(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    flags: &[(&str, String)],
) -> Result<PipelineConfig, ConfigError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = file {
        let contents = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for (line, key, value) in parse_config_file(&contents)? {
            config.set(&key, &value, &format!("{} line {line}", path.display()))?;
        }
    }
    for key in KEYS {
        let name = env_var_name(key);
        if let Some(value) = env.get(&name) {
            config.set(key, value, &format!("environment {name}"))?;
        }
    }
    if let Some(key) = env.get(API_KEY_ENV) {
        config.remote.api_key = Some(key.clone());
    }
    for (key, value) in flags {
        config.set(key, value, &format!("flag --{}", key.replace('_', "-")))?;
    }
    config.validate()?;
    Ok(config)
}
