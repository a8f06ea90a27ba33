use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{BackendError, BackendReply, ChatBackend};
use super::LlmRequest;

/// Deterministic backend driven by a closure over the request.
pub struct FnBackend {
    respond: Box<dyn Fn(&LlmRequest) -> String + Send + Sync>,
}

impl FnBackend {
    pub fn new(respond: impl Fn(&LlmRequest) -> String + Send + Sync + 'static) -> Self {
        FnBackend {
            respond: Box::new(respond),
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        FnBackend::new(move |_| text.clone())
    }
}

impl ChatBackend for FnBackend {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        Ok(BackendReply::text((self.respond)(request)))
    }
}

/// Returns queued outcomes in order, then fails permanently.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Result<BackendReply, BackendError>>>,
    seen: Mutex<Vec<LlmRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: impl IntoIterator<Item = Result<BackendReply, BackendError>>) -> Self {
        ScriptedBackend {
            queue: Mutex::new(script.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| Ok(BackendReply::text(t))))
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.seen.lock().expect("script lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        self.seen.lock().expect("script lock").push(request.clone());
        self.queue
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::permanent(None, "script exhausted")))
    }
}

/// One line of a replay fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_hash: String,
    pub response_text: String,
}

/// Serves recorded responses keyed by request fingerprint.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    records: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayBackend {
            records: records
                .into_iter()
                .map(|r| (r.request_hash, r.response_text))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        let hash = request.fingerprint();
        self.records
            .get(&hash)
            .map(|t| BackendReply::text(t.clone()))
            .ok_or_else(|| BackendError::permanent(None, format!("no replay fixture for {hash}")))
    }
}

/// Passes requests through and appends each exchange to a fixture file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: impl Into<PathBuf>) -> Self {
        RecordingBackend {
            inner,
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        let reply = self.inner.send(request)?;
        let record = ReplayRecord {
            request_hash: request.fingerprint(),
            response_text: reply.text.clone(),
        };
        let _guard = self.lock.lock().expect("recording lock");
        let line = serde_json::to_string(&record).expect("record serializes");
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| writeln!(f, "{line}"))
            .map_err(|e| BackendError::permanent(None, format!("writing fixture: {e}")))?;
        Ok(reply)
    }
}

/// `/v1/chat/completions`-shaped HTTP backend.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
    // Built lazily so construction is safe inside an async runtime.
    client: OnceLock<reqwest::blocking::Client>,
}

pub const ENV_LLM_URL: &str = "LAPS_LLM_URL";
pub const ENV_LLM_API_KEY: &str = "LAPS_LLM_API_KEY";

impl HttpBackend {
    /// `base_url` may be the full completions URL or an API root such as
    /// `https://host` / `https://host/v1`.
    pub fn new(base_url: &str, api_key: Option<String>) -> Self {
        let trimmed = base_url.trim_end_matches('/');
        let endpoint = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else if trimmed.ends_with("/v1") {
            format!("{trimmed}/chat/completions")
        } else {
            format!("{trimmed}/v1/chat/completions")
        };
        HttpBackend {
            endpoint,
            api_key,
            timeout: Duration::from_secs(120),
            client: OnceLock::new(),
        }
    }

    /// Reads `LAPS_LLM_URL` and `LAPS_LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_LLM_URL).ok()?;
        Some(Self::new(&url, std::env::var(ENV_LLM_API_KEY).ok()))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("http client builds")
        })
    }
}

pub(crate) fn wire_body(request: &LlmRequest) -> Value {
    json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "stream": false,
    })
}

pub(crate) fn parse_wire_reply(body: &Value) -> Result<BackendReply, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::permanent(None, "response has no choices"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::permanent(None, "choice has no message content"))?
        .to_string();
    let truncated = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
    let usage = body.get("usage").and_then(|u| {
        let p = u.get("prompt_tokens")?.as_u64()?;
        let c = u.get("completion_tokens")?.as_u64()?;
        Some((p as u32, c as u32))
    });
    Ok(BackendReply {
        text,
        usage,
        truncated,
    })
}

fn is_transient_status(status: u16) -> bool {
    matches!(status, 408 | 409 | 429 | 500 | 502 | 503 | 504)
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        let mut builder = self.client().post(&self.endpoint).json(&wire_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::transient(None, format!("request failed: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| BackendError::transient(Some(status), format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            let snippet: String = text.chars().take(200).collect();
            return Err(if is_transient_status(status) {
                BackendError::transient(Some(status), snippet)
            } else {
                BackendError::permanent(Some(status), snippet)
            });
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::permanent(Some(status), format!("invalid JSON: {e}")))?;
        parse_wire_reply(&body)
    }
}
