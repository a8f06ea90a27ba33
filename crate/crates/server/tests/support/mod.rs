//! In-process server over a scripted mock model, plus the end-to-end check
//! shared by the API tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use laps_core::dataset::{parse_dataset, record_violations};
use laps_core::guidance::AuditLog;
use laps_core::llm::{FnBackend, LlmClient, LlmRequest};
use laps_core::model::validate_session;
use laps_core::orchestrator::guidance_integrity_violations;
use laps_server::app::{router, AppState};
use laps_server::config::ServerConfig;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const ADMIN: &str = "admin-token";

/// Elicitation predicates alternate false/true, the first acceptance check
/// of every session fails, and extraction finds a fixed item per category.
pub fn mock() -> FnBackend {
    let elicit = Arc::new(AtomicUsize::new(0));
    let accept = Arc::new(AtomicUsize::new(0));
    FnBackend::new(move |req: &LlmRequest| {
        let prompt = &req.messages[0].content;
        if prompt.contains("assistant is collecting the user's") {
            (elicit.fetch_add(1, Ordering::SeqCst) % 2 == 1).to_string()
        } else if prompt.contains("Has the user accepted") {
            (accept.fetch_add(1, Ordering::SeqCst) % 2 == 1).to_string()
        } else if let Some(rest) = prompt.split("Preference category: ").nth(1) {
            match rest.lines().next().unwrap_or_default() {
                "ingredient" => r#"{"liked":["tofu","basil"],"disliked":["cilantro"]}"#.into(),
                "cuisine" => r#"{"liked":["thai"],"disliked":[]}"#.into(),
                _ => r#"{"liked":[],"disliked":[]}"#.into(),
            }
        } else if prompt.contains("target_categories") {
            r#"Step 5: {"guidance":"Ask about it","target_categories":["ingredient"]}"#.into()
        } else {
            r#"Step 5: {"guidance":"Carry on"}"#.into()
        }
    })
}

pub struct TestApp {
    pub dir: TempDir,
    pub config: ServerConfig,
    pub state: Arc<AppState>,
    pub router: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Value,
    pub text: String,
}

impl Reply {
    pub fn code(&self) -> &str {
        self.body["error"]["code"].as_str().unwrap_or_default()
    }
}

impl TestApp {
    pub fn new() -> Self {
        Self::with(|_| {})
    }

    pub fn with(tweak: impl FnOnce(&mut ServerConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ServerConfig {
            storage_dir: dir.path().to_path_buf(),
            ..ServerConfig::default()
        };
        config.auth.admin_token = Some(ADMIN.into());
        tweak(&mut config);
        let state = Arc::new(AppState::from_config(&config, LlmClient::new(mock())).unwrap());
        let router = router(state.clone(), None);
        TestApp {
            dir,
            config,
            state,
            router,
        }
    }

    /// A fresh process over the same storage directory.
    pub fn restart(self) -> Self {
        let state = Arc::new(AppState::from_config(&self.config, LlmClient::new(mock())).unwrap());
        let router = router(state.clone(), None);
        TestApp {
            state,
            router,
            ..self
        }
    }

    pub async fn call(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> Reply {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let body = serde_json::from_str(&text).unwrap_or(Value::Null);
        Reply {
            status,
            headers,
            body,
            text,
        }
    }

    pub async fn get(&self, path: &str, token: &str) -> Reply {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> Reply {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    pub async fn token(&self, worker: &str) -> String {
        let r = self
            .call(
                Method::POST,
                "/auth",
                None,
                Some(json!({ "worker_id": worker })),
            )
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text);
        r.body["token"].as_str().unwrap().to_string()
    }

    /// Returns the new task view.
    pub async fn start(&self, token: &str, domain: &str) -> Value {
        let r = self
            .post("/tasks", token, json!({ "domain": domain }))
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        r.body
    }

    /// One turn by whoever holds it. Recommend turns carry a URL.
    pub async fn step(&self, token: &str, view: &Value) -> Reply {
        let id = view["task_id"].as_str().unwrap();
        let turns = view["dialogue"].as_array().map_or(0, Vec::len);
        let session = &view["session_index"];
        match view["turn_owner"].as_str() {
            Some("assistant") => {
                let text = if view["pending_guidance"]["url_required"] == true {
                    format!("How about this one https://recipes.example.org/{session}/{turns}")
                } else {
                    format!("assistant turn {turns} of session {session}")
                };
                self.post(
                    &format!("/tasks/{id}/assistant-turn"),
                    token,
                    json!({ "text": text }),
                )
                .await
            }
            Some("user") => {
                self.post(
                    &format!("/tasks/{id}/user-turn"),
                    token,
                    json!({ "text": format!("session-{session} reply") }),
                )
                .await
            }
            other => panic!("no turn owner: {other:?}"),
        }
    }

    /// Plays the current session until it leaves the chatting phase.
    pub async fn chat_out(&self, token: &str, mut view: Value) -> Result<Value, String> {
        let mut guard = 0;
        while view["phase"] == "chatting" {
            let r = self.step(token, &view).await;
            if r.status != StatusCode::OK {
                return Err(format!("turn rejected with {}: {}", r.status, r.text));
            }
            view = r.body;
            guard += 1;
            if guard > 200 {
                return Err("session did not close".into());
            }
        }
        Ok(view)
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

/// Three sessions driven only through HTTP, then the export, memory and
/// guidance checks.
pub async fn end_to_end(app: &TestApp) -> Result<String, String> {
    let worker = "worker-e2e";
    let token = app.token(worker).await;
    let mut view = app.start(&token, "recipe").await;
    let id = view["task_id"].as_str().unwrap().to_string();
    for k in 1..=3 {
        view = app.chat_out(&token, view).await?;
        ensure!(
            view["phase"] == "validating",
            "session {k} ended in phase {}",
            view["phase"]
        );
        let draft = app.get(&format!("/tasks/{id}/extraction"), &token).await;
        ensure!(
            draft.status == StatusCode::OK,
            "draft for session {k}: {}",
            draft.text
        );
        ensure!(
            draft.body["session_index"] == k,
            "draft is for session {}",
            draft.body["session_index"]
        );
        let edits = if k == 1 {
            json!([
                { "op": "delete", "target": 0 },
                { "op": "add", "replacement": {
                    "category": "allergy", "attribute": "peanuts", "polarity": "dislike", "source_session": 1 } }
            ])
        } else {
            json!([])
        };
        let r = app
            .post(
                &format!("/tasks/{id}/validation"),
                &token,
                json!({ "edits": edits }),
            )
            .await;
        ensure!(r.status == StatusCode::OK, "validation {k}: {}", r.text);
        view = r.body;
    }
    ensure!(
        view["phase"] == "done",
        "task ended in phase {}",
        view["phase"]
    );

    let export = app.get("/export?split_seed=5", ADMIN).await;
    ensure!(export.status == StatusCode::OK, "export: {}", export.text);
    ensure!(
        export.headers["x-laps-violations"] == "0",
        "export reports violations"
    );
    let records = parse_dataset(&export.text).map_err(|e| e.to_string())?;
    ensure!(
        records.len() == 1 && records[0].sessions.len() == 3,
        "expected one record with three sessions"
    );
    let mut sessions = 0;
    for r in &records {
        for s in &r.sessions {
            let v = validate_session(s);
            ensure!(v.is_empty(), "session {} invalid: {v:?}", s.session_index);
            sessions += 1;
        }
        let v = record_violations(r);
        ensure!(v.is_empty(), "record violations: {v:?}");
    }

    // Memory audit: union of the raw commit files equals the snapshot.
    let task = app
        .state
        .task_snapshots()
        .into_iter()
        .find(|t| t.task_id == id)
        .ok_or("task missing")?;
    let worker_dir = app.config.memory_dir().join("recipe").join(worker);
    let mut oracle = BTreeSet::new();
    for k in 1..=3 {
        let path = worker_dir.join(format!("commit-{k}.json"));
        let raw: Value = serde_json::from_slice(
            &std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?,
        )
        .map_err(|e| e.to_string())?;
        for p in raw["pairs"].as_array().ok_or("commit without pairs")? {
            oracle.insert((
                p["category"].as_str().unwrap_or_default().to_string(),
                p["attribute"].as_str().unwrap_or_default().to_string(),
                p["polarity"].as_str().unwrap_or_default().to_string(),
            ));
        }
    }
    let snapshot: BTreeSet<_> = task
        .worker
        .memory
        .snapshot()
        .pairs()
        .iter()
        .map(|p| {
            (
                p.category.clone(),
                p.attribute.clone(),
                p.polarity.as_str().to_string(),
            )
        })
        .collect();
    ensure!(
        snapshot == oracle,
        "memory snapshot {snapshot:?} differs from commit union {oracle:?}"
    );
    ensure!(
        oracle.contains(&("allergy".into(), "peanuts".into(), "dislike".into())),
        "validated addition missing from memory"
    );
    let exported_prefs: BTreeSet<_> = records[0]
        .sessions
        .iter()
        .flat_map(|s| s.extracted.iter())
        .map(|p| {
            (
                p.category.clone(),
                p.attribute.clone(),
                p.polarity.as_str().to_string(),
            )
        })
        .collect();
    ensure!(
        exported_prefs == oracle,
        "exported preferences differ from memory"
    );

    // Guidance integrity: in the task, in the export and in the audit log.
    let v = guidance_integrity_violations(&task.sessions(), &task.guidance_log);
    ensure!(v.is_empty(), "guidance integrity: {v:?}");
    let audited = AuditLog::new(app.config.audit_path())
        .read()
        .map_err(|e| e.to_string())?;
    let mut linked = 0;
    for s in &records[0].sessions {
        for u in s
            .utterances
            .iter()
            .filter(|u| u.role == laps_core::model::Role::Assistant)
        {
            let gid = u
                .guidance_id
                .as_ref()
                .ok_or("assistant turn without guidance")?;
            let g = records[0]
                .guidance
                .iter()
                .find(|g| &g.guidance_id == gid)
                .ok_or("guidance not exported")?;
            ensure!(
                Some(g.act) == u.act,
                "act mismatch on session {} turn {}",
                s.session_index,
                u.turn_index
            );
            if g.act != laps_core::model::DialogueAct::Goodbye {
                ensure!(
                    audited.iter().any(|r| &r.guidance_id == gid),
                    "guidance {gid} not audited"
                );
            }
            linked += 1;
        }
    }
    Ok(format!(
        "{sessions} sessions exported, {} memory pairs, {linked} guidance links",
        oracle.len()
    ))
}
