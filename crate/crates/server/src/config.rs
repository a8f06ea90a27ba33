//! Server configuration: one TOML file, then `LAPS_*` environment
//! overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use laps_core::llm::{
    HttpBackend, LlmClient, RecordingBackend, ReplayBackend, RetryPolicy, StageSettings,
};
use laps_core::orchestrator::OrchestratorConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat completions endpoint.
    #[default]
    Http,
    /// Answers from a recorded fixture file; unknown requests fail.
    Replay,
    /// HTTP, with every exchange appended to `record_path`.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub replay_path: Option<PathBuf>,
    pub record_path: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::Http,
            url: None,
            api_key: None,
            replay_path: None,
            record_path: None,
            timeout_secs: 120,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl LlmConfig {
    pub fn client(&self) -> anyhow::Result<LlmClient> {
        let http = || -> anyhow::Result<HttpBackend> {
            let url = self
                .url
                .as_deref()
                .context("llm.url (or LAPS_LLM_URL) is required for the http backend")?;
            Ok(HttpBackend::new(url, self.api_key.clone())
                .with_timeout(Duration::from_secs(self.timeout_secs)))
        };
        let client = match self.backend {
            BackendKind::Http => LlmClient::new(http()?),
            BackendKind::Replay => {
                let path = self
                    .replay_path
                    .as_deref()
                    .context("llm.replay_path is required for replay")?;
                let replay = ReplayBackend::load(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                LlmClient::new(replay)
            }
            BackendKind::Record => {
                let path = self
                    .record_path
                    .clone()
                    .context("llm.record_path is required for record")?;
                LlmClient::new(RecordingBackend::new(http()?, path))
            }
        };
        Ok(client
            .with_retry(self.retry.clone())
            .with_max_in_flight(self.max_in_flight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    pub token_ttl_secs: i64,
    /// Bearer token for admin routes; admin routes are closed when unset.
    pub admin_token: Option<String>,
    /// When set, `POST /auth` must present it.
    pub worker_secret: Option<String>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            token_ttl_secs: 8 * 3600,
            admin_token: None,
            worker_secret: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Holds `tasks/`, `memory/` and `audit.ndjson`.
    pub storage_dir: PathBuf,
    /// Extra `*.toml` domain files; built-in domains are always available.
    pub domains_dir: Option<PathBuf>,
    /// Template overrides.
    pub templates_dir: Option<PathBuf>,
    /// Console build output served at `/`.
    pub static_dir: Option<PathBuf>,
    pub llm: LlmConfig,
    pub stages: StageSettings,
    pub orchestrator: OrchestratorConfig,
    pub auth: AuthConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            storage_dir: PathBuf::from("laps-data"),
            domains_dir: None,
            templates_dir: None,
            static_dir: None,
            llm: LlmConfig::default(),
            stages: StageSettings::default(),
            orchestrator: OrchestratorConfig::default(),
            auth: AuthConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    /// Reads `path` when given (defaults otherwise) and applies the process
    /// environment on top.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => Self::parse(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?,
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(v) = get("LAPS_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("LAPS_STORAGE_DIR") {
            self.storage_dir = v.into();
        }
        if let Some(v) = get("LAPS_DOMAINS_DIR") {
            self.domains_dir = Some(v.into());
        }
        if let Some(v) = get("LAPS_STATIC_DIR") {
            self.static_dir = Some(v.into());
        }
        if let Some(v) = get("LAPS_LLM_BACKEND") {
            self.llm.backend = match v.as_str() {
                "http" => BackendKind::Http,
                "replay" => BackendKind::Replay,
                "record" => BackendKind::Record,
                other => bail!("LAPS_LLM_BACKEND: unknown backend `{other}`"),
            };
        }
        if let Some(v) = get("LAPS_LLM_URL") {
            self.llm.url = Some(v);
        }
        if let Some(v) = get("LAPS_LLM_API_KEY") {
            self.llm.api_key = Some(v);
        }
        if let Some(v) = get("LAPS_LLM_REPLAY") {
            self.llm.replay_path = Some(v.into());
        }
        if let Some(v) = get("LAPS_ADMIN_TOKEN") {
            self.auth.admin_token = Some(v);
        }
        if let Some(v) = get("LAPS_WORKER_SECRET") {
            self.auth.worker_secret = Some(v);
        }
        if let Some(v) = get("LAPS_TOKEN_TTL_SECS") {
            self.auth.token_ttl_secs = v.parse().context("LAPS_TOKEN_TTL_SECS")?;
        }
        Ok(())
    }

    pub fn tasks_dir(&self) -> PathBuf {
        self.storage_dir.join("tasks")
    }

    pub fn memory_dir(&self) -> PathBuf {
        self.storage_dir.join("memory")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.storage_dir.join("audit.ndjson")
    }
}
