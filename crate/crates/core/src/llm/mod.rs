//! Provider-agnostic chat completion.
//!
//! Pipeline code only talks to [`LlmClient`]; which backend sits behind it
//! (HTTP endpoint, deterministic mock, replay fixtures) is configuration.

mod backends;
mod client;
mod parse;

pub use backends::{
    FnBackend, HttpBackend, RecordingBackend, ReplayBackend, ReplayRecord, ScriptedBackend,
};
pub use client::{BackendError, BackendReply, ChatBackend, LlmClient, RetryPolicy, UsageTotals};
pub use parse::{parse_boolean_verdict, parse_cot_json, CotMap, CotValue};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Decoding settings for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub model_id: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl StageConfig {
    pub fn new(model_id: impl Into<String>, temperature: f32, max_output_tokens: u32) -> Self {
        StageConfig {
            model_id: model_id.into(),
            temperature,
            max_output_tokens,
        }
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> LlmRequest {
        LlmRequest {
            messages,
            temperature: self.temperature,
            model_id: self.model_id.clone(),
            max_output_tokens: self.max_output_tokens,
        }
    }
}

/// Per-stage model settings. Extraction defaults to the stronger model and
/// synthetic self-play to temperature 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSettings {
    pub act: StageConfig,
    pub guidance: StageConfig,
    pub extraction: StageConfig,
    pub synthetic: StageConfig,
    pub recommendation: StageConfig,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            act: StageConfig::new("gpt-3.5-turbo", 0.0, 512),
            guidance: StageConfig::new("gpt-3.5-turbo", 0.7, 768),
            extraction: StageConfig::new("gpt-4", 0.0, 768),
            synthetic: StageConfig::new("gpt-3.5-turbo", 1.0, 512),
            recommendation: StageConfig::new("llama-2-7b-chat", 0.7, 512),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl LlmRequest {
    /// Single user-message request with the default temperature of 1.0.
    pub fn prompt(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        LlmRequest {
            messages: vec![ChatMessage::user(prompt)],
            temperature: 1.0,
            model_id: model_id.into(),
            max_output_tokens: 512,
        }
    }

    /// Stable hex digest of the request, used as the replay-fixture key.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Text of the final user message, which is where prompts live.
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    /// True when the backend reported nothing and whitespace counts were used.
    pub estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// Whitespace token count, the fallback counter for prompt-size accounting.
pub fn count_tokens(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("completion truncated at the output-token limit")]
    ResponseTooLong,
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("no parseable structured block in model output")]
    MalformedOutput,
    #[error("model output lacks required keys: {0:?}")]
    MissingKeys(Vec<String>),
    #[error("empty request: at least one message is required")]
    EmptyRequest,
}
