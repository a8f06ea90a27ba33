//! Bearer tokens. A worker holds at most one live token; issuing a new one
//! revokes the old.

use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSession {
    pub token: String,
    pub worker_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Worker(String),
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthFailure {
    Missing,
    Unknown,
    Expired,
}

#[derive(Debug)]
pub struct TokenStore {
    ttl: Duration,
    admin_token: Option<String>,
    // token -> session; worker -> token keeps one token per worker.
    sessions: Mutex<(HashMap<String, ApiSession>, HashMap<String, String>)>,
}

impl TokenStore {
    pub fn new(ttl_secs: i64, admin_token: Option<String>) -> Self {
        TokenStore {
            ttl: Duration::seconds(ttl_secs),
            admin_token,
            sessions: Mutex::new(Default::default()),
        }
    }

    pub fn issue(&self, worker_id: &str, now: DateTime<Utc>) -> ApiSession {
        let session = ApiSession {
            token: Uuid::new_v4().simple().to_string(),
            worker_id: worker_id.to_string(),
            expires_at: now + self.ttl,
        };
        let mut guard = self.sessions.lock().expect("token lock");
        let (by_token, by_worker) = &mut *guard;
        if let Some(old) = by_worker.insert(worker_id.to_string(), session.token.clone()) {
            by_token.remove(&old);
        }
        by_token.insert(session.token.clone(), session.clone());
        session
    }

    /// Resolves an `Authorization` header value.
    pub fn authenticate(
        &self,
        header: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Principal, AuthFailure> {
        let token = header
            .and_then(|h| h.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or(AuthFailure::Missing)?;
        if self.admin_token.as_deref() == Some(token) {
            return Ok(Principal::Admin);
        }
        let mut guard = self.sessions.lock().expect("token lock");
        let (by_token, by_worker) = &mut *guard;
        let session = by_token.get(token).ok_or(AuthFailure::Unknown)?;
        if now >= session.expires_at {
            let worker = session.worker_id.clone();
            by_token.remove(token);
            by_worker.remove(&worker);
            return Err(AuthFailure::Expired);
        }
        Ok(Principal::Worker(session.worker_id.clone()))
    }
}
