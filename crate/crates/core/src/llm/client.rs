use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{count_tokens, LlmError, LlmRequest, LlmResponse, Usage};

/// What a backend returns for one attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    /// (prompt, completion) token counts when the provider reports them.
    pub usage: Option<(u32, u32)>,
    pub truncated: bool,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        BackendReply {
            text: text.into(),
            usage: None,
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Rate limiting, 5xx, timeouts, connection resets: worth retrying.
    Transient {
        status: Option<u16>,
        message: String,
    },
    /// Anything a retry will not fix.
    Permanent {
        status: Option<u16>,
        message: String,
    },
}

impl BackendError {
    pub fn transient(status: Option<u16>, message: impl Into<String>) -> Self {
        BackendError::Transient {
            status,
            message: message.into(),
        }
    }

    pub fn permanent(status: Option<u16>, message: impl Into<String>) -> Self {
        BackendError::Permanent {
            status,
            message: message.into(),
        }
    }

    fn describe(&self) -> String {
        match self {
            BackendError::Transient {
                status: Some(s),
                message,
            }
            | BackendError::Permanent {
                status: Some(s),
                message,
            } => format!("HTTP {s}: {message}"),
            BackendError::Transient { message, .. } | BackendError::Permanent { message, .. } => {
                message.clone()
            }
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &LlmRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub retries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated_calls: u64,
}

struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().expect("in-flight lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("in-flight lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable, blocking chat-completion client with retries, an in-flight cap
/// and token accounting.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    in_flight: Arc<InFlight>,
    totals: Arc<Mutex<UsageTotals>>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("retry", &self.retry)
            .field("max_in_flight", &self.in_flight.limit)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        LlmClient {
            backend,
            retry: RetryPolicy::default(),
            in_flight: Arc::new(InFlight {
                limit: 8,
                current: Mutex::new(0),
                freed: Condvar::new(),
            }),
            totals: Arc::new(Mutex::new(UsageTotals::default())),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Arc::new(InFlight {
            limit: limit.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        });
        self
    }

    pub fn totals(&self) -> UsageTotals {
        *self.totals.lock().expect("usage lock")
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::EmptyRequest);
        }
        let attempts = self.retry.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                self.totals.lock().expect("usage lock").retries += 1;
                thread::sleep(self.retry.delay(attempt - 1));
            }
            let started = Instant::now();
            let outcome = {
                let _slot = self.in_flight.acquire();
                self.backend.send(request)
            };
            match outcome {
                Ok(reply) if reply.truncated => return Err(LlmError::ResponseTooLong),
                Ok(reply) => {
                    let response = self.account(request, reply, started.elapsed());
                    debug!(
                        attempt,
                        latency_ms = response.latency_ms,
                        "completion received"
                    );
                    return Ok(response);
                }
                Err(err @ BackendError::Permanent { .. }) => {
                    return Err(LlmError::Rejected(err.describe()));
                }
                Err(err) => {
                    last_error = err.describe();
                    warn!(attempt, attempts, error = %last_error, "transient backend failure");
                }
            }
        }
        Err(LlmError::BackendUnavailable {
            attempts,
            last_error,
        })
    }

    fn account(&self, request: &LlmRequest, reply: BackendReply, elapsed: Duration) -> LlmResponse {
        let usage = match reply.usage {
            Some((prompt_tokens, completion_tokens)) => Usage {
                prompt_tokens,
                completion_tokens,
                estimated: false,
            },
            None => Usage {
                prompt_tokens: request
                    .messages
                    .iter()
                    .map(|m| count_tokens(&m.content))
                    .sum(),
                completion_tokens: count_tokens(&reply.text),
                estimated: true,
            },
        };
        let mut totals = self.totals.lock().expect("usage lock");
        totals.calls += 1;
        totals.prompt_tokens += u64::from(usage.prompt_tokens);
        totals.completion_tokens += u64::from(usage.completion_tokens);
        if usage.estimated {
            totals.estimated_calls += 1;
        }
        LlmResponse {
            text: reply.text,
            usage,
            latency_ms: elapsed.as_millis() as u64,
        }
    }
}
