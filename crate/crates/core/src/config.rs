//! Service and CLI configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBackendConfig;
use crate::error::{Error, Result};
use crate::generation::{DecodingConfig, LmBackendConfig};
use crate::matcher::StrategyKind;

pub const EMBEDDING_URL_ENV: &str = "PDP_EMBEDDING_URL";
pub const LM_URL_ENV: &str = "PDP_LM_URL";

fn default_bind_addr() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_strategy() -> StrategyKind {
    StrategyKind::Dynamic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub embedding_backend: EmbeddingBackendConfig,
    pub lm_backend: LmBackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_path: Option<PathBuf>,
    #[serde(default = "default_bind_addr")]
    pub bind_addr: String,
    #[serde(default)]
    pub default_decoding: DecodingConfig,
    #[serde(default = "default_strategy")]
    pub default_strategy: StrategyKind,
    /// Allowed browser origin; any origin when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cors_origin: Option<String>,
    /// Directory for per-session JSONL transcripts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_log_dir: Option<PathBuf>,
    /// Directory where evaluation reports are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reports_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
}

impl EngineConfig {
    /// Offline configuration: mock encoder of `dim` and the echo LM.
    pub fn offline(dim: usize) -> Self {
        EngineConfig {
            embedding_backend: EmbeddingBackendConfig::mock(dim),
            lm_backend: LmBackendConfig::echo(),
            index_path: None,
            bind_addr: default_bind_addr(),
            default_decoding: DecodingConfig::default(),
            default_strategy: default_strategy(),
            cors_origin: None,
            session_log_dir: None,
            reports_dir: None,
            max_prompt_chars: None,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::format("config file", e))
    }

    /// Reads the file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&json)?;
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    /// Endpoint URLs from `PDP_EMBEDDING_URL` / `PDP_LM_URL` win over the file.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(url) = lookup(EMBEDDING_URL_ENV).filter(|u| !u.is_empty()) {
            self.embedding_backend.endpoint_url = Some(url);
        }
        if let Some(url) = lookup(LM_URL_ENV).filter(|u| !u.is_empty()) {
            self.lm_backend.endpoint_url = Some(url);
        }
    }
}
