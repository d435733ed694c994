//! Pluggable translator / fuser / enhancer / embedder / reward backends.
//!
//! Every backend speaks the same JSON schema regardless of transport:
//!
//! | role       | path         | request                              | response                 |
//! |------------|--------------|--------------------------------------|--------------------------|
//! | translator | `/translate` | `{source, src_lang, tgt_lang}`       | `{translation}`          |
//! | fuser      | `/fuse`      | `{source, candidates: [string]}`     | `{translation}`          |
//! | enhancer   | `/enhance`   | `{prompt}`                           | `{translation}`          |
//! | embedder   | `/embed`     | `{text}`                             | `{vector: [768 floats]}` |
//! | reward     | `/score`     | `{source, candidate}`                | `{score}`                |
//!
//! HTTP backends receive `POST <endpoint><path>` with the request as the
//! body. Subprocess backends receive one JSON object per line on stdin,
//! the request plus an `"op"` field naming the path without its slash,
//! and answer with one JSON object per line on stdout. Either transport
//! may answer `{"error": "..."}` instead.

mod http;
mod ledger;
mod mock;
mod planted;
mod pool;
mod subprocess;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use http::{pool_handler, HttpTransport, StubHandler, StubServer};
pub use ledger::{ledger_report, BackendCost, CostLedger, LedgerSummary, RoleTotals};
pub use mock::{
    make_mock_pool, overlap_fuse, EchoEnhancer, FixedTableTranslator, HashEmbedBackend, MockHandler, MockPoolKind,
    NoisyReferenceTranslator, OverlapFuser, ReferenceEnhancer, ReferenceLookup, ReferenceScorer,
};
pub use planted::{combinations, PlantedTranslator, PlantedWorld, MAX_DOMAINS};
pub use pool::Pool;
pub use subprocess::SubprocessTransport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Translator,
    Fuser,
    Enhancer,
    Embedder,
    Reward,
    /// Cost-model entries for simulated rankers; never called over the wire.
    Ranker,
}

impl Role {
    pub fn path(self) -> &'static str {
        match self {
            Role::Translator => "/translate",
            Role::Fuser => "/fuse",
            Role::Enhancer => "/enhance",
            Role::Embedder => "/embed",
            Role::Reward => "/score",
            Role::Ranker => "/rank",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Translator => "translator",
            Role::Fuser => "fuser",
            Role::Enhancer => "enhancer",
            Role::Embedder => "embedder",
            Role::Reward => "reward",
            Role::Ranker => "ranker",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Translate { source: String, src_lang: String, tgt_lang: String },
    Fuse { source: String, candidates: Vec<String> },
    Enhance { prompt: String },
    Embed { text: String },
    Score { source: String, candidate: String },
}

impl Request {
    pub fn role(&self) -> Role {
        match self {
            Request::Translate { .. } => Role::Translator,
            Request::Fuse { .. } => Role::Fuser,
            Request::Enhance { .. } => Role::Enhancer,
            Request::Embed { .. } => Role::Embedder,
            Request::Score { .. } => Role::Reward,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Request::Translate { source, src_lang, tgt_lang } => {
                json!({"source": source, "src_lang": src_lang, "tgt_lang": tgt_lang})
            }
            Request::Fuse { source, candidates } => json!({"source": source, "candidates": candidates}),
            Request::Enhance { prompt } => json!({"prompt": prompt}),
            Request::Embed { text } => json!({"text": text}),
            Request::Score { source, candidate } => json!({"source": source, "candidate": candidate}),
        }
    }

    /// Parse a request body arriving on `path` (e.g. `/translate`).
    pub fn from_json(path: &str, body: &Value) -> Result<Self, String> {
        let s = |key: &str| -> Result<String, String> {
            body.get(key)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| format!("missing string field `{key}`"))
        };
        match path {
            "/translate" => Ok(Request::Translate {
                source: s("source")?,
                src_lang: s("src_lang")?,
                tgt_lang: s("tgt_lang")?,
            }),
            "/fuse" => {
                let candidates = body
                    .get("candidates")
                    .and_then(Value::as_array)
                    .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_owned)).collect::<Option<Vec<_>>>())
                    .ok_or("missing string array `candidates`")?;
                Ok(Request::Fuse {
                    source: s("source")?,
                    candidates,
                })
            }
            "/enhance" => Ok(Request::Enhance { prompt: s("prompt")? }),
            "/embed" => Ok(Request::Embed { text: s("text")? }),
            "/score" => Ok(Request::Score {
                source: s("source")?,
                candidate: s("candidate")?,
            }),
            other => Err(format!("unknown endpoint {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Translation(String),
    Vector(Vec<f64>),
    Score(f64),
}

impl Response {
    pub fn to_json(&self) -> Value {
        match self {
            Response::Translation(t) => json!({ "translation": t }),
            Response::Vector(v) => json!({ "vector": v }),
            Response::Score(s) => json!({ "score": s }),
        }
    }

    /// Validate a wire response against the schema of `role`.
    pub fn from_json(role: Role, v: &Value) -> Result<Self, String> {
        if let Some(err) = v.get("error") {
            return Err(format!("backend reported error: {err}"));
        }
        match role {
            Role::Translator | Role::Fuser | Role::Enhancer => v
                .get("translation")
                .and_then(Value::as_str)
                .map(|t| Response::Translation(t.to_owned()))
                .ok_or_else(|| "response lacks string field `translation`".into()),
            Role::Embedder => {
                let arr = v.get("vector").and_then(Value::as_array).ok_or("response lacks array `vector`")?;
                let vec = arr
                    .iter()
                    .map(|x| x.as_f64().filter(|f| f.is_finite()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or("`vector` must hold finite numbers")?;
                if vec.len() != crate::embedder::STATE_DIM {
                    return Err(format!("`vector` has {} entries, expected {}", vec.len(), crate::embedder::STATE_DIM));
                }
                Ok(Response::Vector(vec))
            }
            Role::Reward => v
                .get("score")
                .and_then(Value::as_f64)
                .filter(|f| f.is_finite())
                .map(Response::Score)
                .ok_or_else(|| "response lacks finite number `score`".into()),
            Role::Ranker => Err("ranker entries are not callable".into()),
        }
    }

    pub fn into_text(self) -> Result<String, BackendError> {
        match self {
            Response::Translation(t) => Ok(t),
            other => Err(BackendError::unexpected(format!("{other:?}"))),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f64>, BackendError> {
        match self {
            Response::Vector(v) => Ok(v),
            other => Err(BackendError::unexpected(format!("{other:?}"))),
        }
    }

    pub fn into_score(self) -> Result<f64, BackendError> {
        match self {
            Response::Score(s) => Ok(s),
            other => Err(BackendError::unexpected(format!("{other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendErrorKind {
    #[error("timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("process exited with status {0:?}")]
    Exited(Option<i32>),
    #[error("http status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request rejected: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("backend `{backend}` failed after {attempts} attempt(s): {kind}")]
pub struct BackendError {
    pub backend: String,
    pub attempts: u32,
    pub kind: BackendErrorKind,
}

impl BackendError {
    fn unexpected(what: String) -> Self {
        BackendError {
            backend: "?".into(),
            attempts: 1,
            kind: BackendErrorKind::Malformed(format!("unexpected response {what}")),
        }
    }

    fn retryable(kind: &BackendErrorKind) -> bool {
        match kind {
            BackendErrorKind::Timeout | BackendErrorKind::Transport(_) => true,
            BackendErrorKind::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub timeout_ms: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            attempts: 3,
            backoff_ms: 100,
            backoff_cap_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): `backoff * 2^(attempt-1)`
    /// capped at `backoff_cap_ms`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

pub(crate) enum TransportImpl {
    Mock(Arc<dyn MockHandler>),
    Http(HttpTransport),
    Subprocess(SubprocessTransport),
}

/// One configured backend.
pub struct Backend {
    name: String,
    role: Role,
    system_id: Option<usize>,
    transport: TransportImpl,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.transport {
            TransportImpl::Mock(_) => "mock",
            TransportImpl::Http(_) => "http",
            TransportImpl::Subprocess(_) => "subprocess",
        };
        f.debug_struct("Backend")
            .field("name", &self.name)
            .field("role", &self.role)
            .field("system_id", &self.system_id)
            .field("transport", &kind)
            .finish()
    }
}

impl Backend {
    pub fn mock(name: impl Into<String>, role: Role, handler: Arc<dyn MockHandler>) -> Self {
        Self {
            name: name.into(),
            role,
            system_id: None,
            transport: TransportImpl::Mock(handler),
        }
    }

    pub fn http(name: impl Into<String>, role: Role, endpoint: impl Into<String>, policy: RetryPolicy) -> Self {
        Self {
            name: name.into(),
            role,
            system_id: None,
            transport: TransportImpl::Http(HttpTransport::new(endpoint, policy)),
        }
    }

    pub fn subprocess(name: impl Into<String>, role: Role, command: Vec<String>, policy: RetryPolicy) -> Self {
        Self {
            name: name.into(),
            role,
            system_id: None,
            transport: TransportImpl::Subprocess(SubprocessTransport::new(command, policy.timeout_ms)),
        }
    }

    pub fn with_system_id(mut self, id: usize) -> Self {
        self.system_id = Some(id);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn system_id(&self) -> Option<usize> {
        self.system_id
    }

    fn max_attempts(&self) -> u32 {
        match &self.transport {
            TransportImpl::Http(h) => h.policy().attempts.max(1),
            _ => 1,
        }
    }

    fn call_once(&self, req: &Request) -> Result<Value, BackendErrorKind> {
        match &self.transport {
            TransportImpl::Mock(h) => h
                .handle(req)
                .map(|r| r.to_json())
                .map_err(BackendErrorKind::Rejected),
            TransportImpl::Http(h) => h.post(req.role().path(), &req.to_json()),
            TransportImpl::Subprocess(s) => s.request(req),
        }
    }

    /// Validated call. Every attempt is recorded in `ledger`, attributed to
    /// `sentence` when given; HTTP retries with capped exponential backoff.
    pub fn call(&self, req: &Request, ledger: &CostLedger, sentence: Option<usize>) -> Result<Response, BackendError> {
        let fail = |attempts, kind| BackendError {
            backend: self.name.clone(),
            attempts,
            kind,
        };
        if req.role() != self.role {
            return Err(fail(
                0,
                BackendErrorKind::Rejected(format!("{} request sent to a {} backend", req.role(), self.role)),
            ));
        }
        let max = self.max_attempts();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = self.call_once(req);
            ledger.record(&self.name, self.role, started.elapsed(), sentence);
            let kind = match outcome.and_then(|v| Response::from_json(self.role, &v).map_err(BackendErrorKind::Malformed)) {
                Ok(resp) => return Ok(resp),
                Err(kind) => kind,
            };
            if attempt >= max || !BackendError::retryable(&kind) {
                return Err(fail(attempt, kind));
            }
            if let TransportImpl::Http(h) = &self.transport {
                std::thread::sleep(h.policy().backoff(attempt));
            }
        }
    }
}
