//! Shared configuration for the CLI and the HTTP service.
//!
//! Files ending in `.json` are read as JSON, anything else as TOML. Secrets
//! never appear here; specs name the environment variable to read instead.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbedderSpec;
use crate::generation::LlmSpec;
use crate::ingest::ColumnMap;
use crate::labeling::{BaselineThresholds, WindowSpec};
use crate::retrieval::{RetrievalConfig, ScorerSpec};
use crate::summarize::SummarizeOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Session files live here; defaults to `<store_path>/sessions`.
    pub session_dir: Option<PathBuf>,
    pub session_ttl_secs: u64,
    /// Environment variable holding the shared bearer token, if any.
    pub auth_token_env: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), session_dir: None, session_ttl_secs: 24 * 3600, auth_token_env: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub store_path: PathBuf,
    pub embedder: EmbedderSpec,
    pub scorer: ScorerSpec,
    pub llm: LlmSpec,
    pub retrieval: RetrievalConfig,
    pub summarize: SummarizeOptions,
    pub window: WindowSpec,
    pub baseline: BaselineThresholds,
    pub conn_columns: ColumnMap,
    pub anomaly_columns: ColumnMap,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store_path: PathBuf::from("kb"),
            embedder: EmbedderSpec::default(),
            scorer: ScorerSpec::default(),
            llm: LlmSpec::default(),
            retrieval: RetrievalConfig::default(),
            summarize: SummarizeOptions::default(),
            window: WindowSpec::default(),
            baseline: BaselineThresholds::default(),
            conn_columns: ColumnMap::default(),
            anomaly_columns: ColumnMap::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let parse_err = |message: String| ConfigError::Parse { path: path.into(), message };
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }

    pub fn session_dir(&self) -> PathBuf {
        self.service.session_dir.clone().unwrap_or_else(|| self.store_path.join("sessions"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedderKind;

    #[test]
    fn toml_partial_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flowsight.toml");
        std::fs::write(
            &path,
            r#"
store_path = "/tmp/kb"

[embedder]
dim = 64

[retrieval]
tau = 0.25
k = 4

[conn_columns]
src_ip = "source"

[service]
bind = "0.0.0.0:9000"
"#,
        )
        .unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.store_path, PathBuf::from("/tmp/kb"));
        assert_eq!(c.embedder.dim, 64);
        assert_eq!(c.embedder.kind, EmbedderKind::HashStub);
        assert_eq!(c.retrieval.tau, 0.25);
        assert_eq!(c.retrieval.min_evidence, 2);
        assert_eq!(c.conn_columns.0["src_ip"], "source");
        assert_eq!(c.service.session_ttl_secs, 86_400);
        assert_eq!(c.session_dir(), PathBuf::from("/tmp/kb/sessions"));
    }

    #[test]
    fn json_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, serde_json::to_string(&Config::default()).unwrap()).unwrap();
        assert_eq!(Config::load(&path).unwrap(), Config::default());
        std::fs::write(&path, "{\"retrieval\": 3}").unwrap();
        assert!(matches!(Config::load(&path), Err(ConfigError::Parse { .. })));
        assert!(matches!(Config::load(&dir.path().join("missing.toml")), Err(ConfigError::Io { .. })));
    }
}
