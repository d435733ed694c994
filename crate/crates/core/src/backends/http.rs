use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendErrorKind, CostLedger, Pool, Request, RetryPolicy, Role};

/// JSON-over-HTTP client for one backend endpoint.
pub struct HttpTransport {
    endpoint: String,
    policy: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, policy: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            policy,
            agent,
        }
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<Value, BackendErrorKind> {
        let url = format!("{}{}", self.endpoint, path);
        let mut resp = self.agent.post(&url).send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendErrorKind::Timeout,
            other => BackendErrorKind::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendErrorKind::Transport(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
                .unwrap_or(text);
            return Err(BackendErrorKind::Status { status, message });
        }
        serde_json::from_str(&text).map_err(|e| BackendErrorKind::Malformed(format!("invalid JSON: {e}")))
    }
}

/// Request handler for [`StubServer`]: receives the URL path and the parsed
/// JSON body, returns a JSON body or an HTTP status with an error message.
pub type StubHandler = Arc<dyn Fn(&str, &Value) -> Result<Value, (u16, String)> + Send + Sync>;

/// Minimal multi-threaded JSON server for tests and `serve-stub`.
///
/// `GET` or `POST /ping` always answers `{"ok":true}`; every other path is
/// handed to the handler. Errors are returned as `{"error": "..."}`.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl StubServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and start `threads` workers.
    pub fn start(addr: &str, threads: usize, handler: StubHandler) -> io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("stub server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, stop, handler) = (server.clone(), stop.clone(), handler.clone());
                std::thread::spawn(move || loop {
                    match server.recv() {
                        Ok(rq) => serve_one(rq, &handler),
                        Err(_) if stop.load(Ordering::SeqCst) => break,
                        Err(e) => log::warn!("stub server: {e}"),
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            addr,
            stop,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server is shut down from another thread (never, for
    /// `serve-stub`).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn serve_one(mut rq: tiny_http::Request, handler: &StubHandler) {
    let path = rq.url().split('?').next().unwrap_or("").to_owned();
    let (status, body) = if path == "/ping" {
        (200, json!({"ok": true}))
    } else {
        let mut text = String::new();
        match rq.as_reader().read_to_string(&mut text) {
            Err(e) => (400, json!({"error": format!("unreadable body: {e}")})),
            Ok(_) => match serde_json::from_str::<Value>(&text) {
                Err(e) => (400, json!({"error": format!("invalid JSON: {e}")})),
                Ok(v) => match handler(&path, &v) {
                    Ok(out) => (200, out),
                    Err((code, msg)) => (code, json!({ "error": msg })),
                },
            },
        }
    };
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let resp = tiny_http::Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = rq.respond(resp) {
        log::warn!("stub server: failed to respond: {e}");
    }
}

/// Route wire requests to the backends of `pool`.
///
/// Translators answer on `/sys/{i}/translate` (and system 0 also on
/// `/translate`); the other roles answer on their own paths.
pub fn pool_handler(pool: Arc<Pool>) -> StubHandler {
    Arc::new(move |path: &str, body: &Value| {
        let (backend, role_path) = if let Some(rest) = path.strip_prefix("/sys/") {
            let (idx, tail) = rest.split_once('/').ok_or((404, format!("no route for {path}")))?;
            let idx: usize = idx.parse().map_err(|_| (404, format!("bad system index in {path}")))?;
            let b = pool.translators().get(idx).ok_or((404, format!("no system {idx}")))?;
            (b.clone(), format!("/{tail}"))
        } else {
            let b = match path {
                "/translate" => pool.translators().first().cloned(),
                "/fuse" => Some(pool.fuser().clone()),
                "/enhance" => pool.enhancer().cloned(),
                "/embed" => pool.embedder().cloned(),
                "/score" => pool.scorer().cloned(),
                _ => None,
            };
            (b.ok_or((404, format!("no backend serves {path}")))?, path.to_owned())
        };
        let req = Request::from_json(&role_path, body).map_err(|e| (400, e))?;
        if req.role() != backend.role() || backend.role() == Role::Ranker {
            return Err((404, format!("{} does not serve {role_path}", backend.name())));
        }
        let ledger = CostLedger::new();
        backend
            .call(&req, &ledger, None)
            .map(|r| r.to_json())
            .map_err(|e| (502, e.to_string()))
    })
}
