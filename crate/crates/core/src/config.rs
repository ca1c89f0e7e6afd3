//! Service configuration (TOML).
//!
//! Relative paths resolve against the directory of the config file.
//! `SAFECHAT_PORT` and `SAFECHAT_AUDIT_LOG` override `port` and
//! `audit_log_path`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::paraphrase::DEFAULT_K;
use crate::safety::SafetyPolicy;

pub const ENV_PORT: &str = "SAFECHAT_PORT";
pub const ENV_AUDIT_LOG: &str = "SAFECHAT_AUDIT_LOG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field} path {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("invalid {0}")]
    Invalid(String),
}

fn default_bot_name() -> String {
    "Election FAQ assistant".to_string()
}

fn default_host() -> String {
    "127.0.0.1".to_string()
}

fn default_port() -> u16 {
    8080
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bot_name")]
    pub bot_name: String,
    pub state_label: String,
    pub corpus_path: PathBuf,
    pub model_path: PathBuf,
    /// Bundled library when absent.
    pub library_path: Option<PathBuf>,
    pub audit_log_path: PathBuf,
    /// Feedback JSON lines; `feedback.jsonl` next to the audit log when absent.
    pub feedback_log_path: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub paraphrase_k: usize,
    #[serde(default)]
    pub rct_enabled: bool,
    #[serde(default)]
    pub rct_seed: u64,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Bearer token for `/api/admin/*`; admin endpoints refuse all calls without one.
    pub admin_token: Option<String>,
    /// Bundled policy when absent.
    pub policy: Option<SafetyPolicy>,
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.corpus_path);
        resolve(&mut cfg.model_path);
        resolve(&mut cfg.audit_log_path);
        if let Some(p) = cfg.library_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.feedback_log_path.as_mut() {
            resolve(p);
        }
        if cfg.paraphrase_k == 0 {
            return Err(ConfigError::Invalid("paraphrase_k must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Reads the file and applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text, base)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = get(ENV_PORT) {
            self.port = port.parse().map_err(|_| ConfigError::Invalid(format!("{ENV_PORT}={port}")))?;
        }
        if let Some(log) = get(ENV_AUDIT_LOG) {
            self.audit_log_path = PathBuf::from(log);
        }
        Ok(())
    }

    /// Paths that must exist before the service starts.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let mut required = vec![("corpus_path", &self.corpus_path), ("model_path", &self.model_path)];
        if let Some(p) = &self.library_path {
            required.push(("library_path", p));
        }
        for (field, path) in required {
            if !path.exists() {
                return Err(ConfigError::MissingPath { field, path: path.clone() });
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> SafetyPolicy {
        self.policy.clone().unwrap_or_else(SafetyPolicy::builtin)
    }

    pub fn feedback_log_path(&self) -> PathBuf {
        self.feedback_log_path.clone().unwrap_or_else(|| {
            self.audit_log_path.parent().unwrap_or(Path::new(".")).join("feedback.jsonl")
        })
    }

    pub fn listen_addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}
