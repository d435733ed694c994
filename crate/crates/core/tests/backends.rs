//! Wire-schema contract tests against in-process HTTP stubs and a shell
//! subprocess.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ensemble_forge::backends::*;
use ensemble_forge::corpus::ParallelCorpus;
use serde_json::{json, Value};

fn quick(attempts: u32, timeout_ms: u64) -> RetryPolicy {
    RetryPolicy {
        timeout_ms,
        attempts,
        backoff_ms: 5,
        backoff_cap_ms: 20,
    }
}

fn translate(source: &str) -> Request {
    Request::Translate {
        source: source.into(),
        src_lang: "en".into(),
        tgt_lang: "hi".into(),
    }
}

fn upper_stub() -> (StubServer, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let handler: StubHandler = Arc::new(move |path: &str, body: &Value| {
        h.fetch_add(1, Ordering::SeqCst);
        match Request::from_json(path, body).map_err(|e| (400, e))? {
            Request::Translate { source, .. } => Ok(json!({ "translation": source.to_uppercase() })),
            _ => Err((404, format!("no route {path}"))),
        }
    });
    (StubServer::start("127.0.0.1:0", 2, handler).unwrap(), hits)
}

#[test]
fn http_translate_roundtrip_records_one_call() {
    let (server, hits) = upper_stub();
    let b = Backend::http("upper", Role::Translator, server.url(), quick(3, 5_000));
    let ledger = CostLedger::new();
    let out = b.call(&translate("hello"), &ledger, Some(4)).unwrap();
    assert_eq!(out, Response::Translation("HELLO".into()));
    assert_eq!(ledger.backend("upper").unwrap().calls, 1);
    assert_eq!(ledger.sentence_calls(4, Role::Translator), 1);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn ping_answers_ok() {
    let (server, _) = upper_stub();
    let mut resp = ureq::get(&format!("{}/ping", server.url())).call().unwrap();
    let v: Value = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    assert_eq!(v, json!({"ok": true}));
}

#[test]
fn timeouts_are_retried_and_each_attempt_recorded() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let handler: StubHandler = Arc::new(move |_: &str, _: &Value| {
        h.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(400));
        Ok(json!({"translation": "late"}))
    });
    let server = StubServer::start("127.0.0.1:0", 4, handler).unwrap();
    let b = Backend::http("slow", Role::Translator, server.url(), quick(3, 80));
    let ledger = CostLedger::new();
    let err = b.call(&translate("x"), &ledger, Some(0)).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::Timeout);
    assert_eq!(err.attempts, 3);
    assert!(err.to_string().contains("slow"), "{err}");
    assert_eq!(ledger.backend("slow").unwrap().calls, 3);
    assert_eq!(ledger.sentence_calls(0, Role::Translator), 3);
}

#[test]
fn server_errors_retry_but_client_errors_do_not() {
    for (status, attempts) in [(503u16, 3u32), (400, 1), (404, 1)] {
        let handler: StubHandler = Arc::new(move |_: &str, _: &Value| Err((status, "nope".into())));
        let server = StubServer::start("127.0.0.1:0", 1, handler).unwrap();
        let b = Backend::http("err", Role::Fuser, server.url(), quick(3, 2_000));
        let ledger = CostLedger::new();
        let req = Request::Fuse {
            source: "s".into(),
            candidates: vec!["a".into()],
        };
        let err = b.call(&req, &ledger, None).unwrap_err();
        assert_eq!(err.attempts, attempts, "status {status}");
        assert_eq!(
            err.kind,
            BackendErrorKind::Status {
                status,
                message: "nope".into()
            }
        );
        assert_eq!(ledger.total_calls(), attempts as u64);
    }
}

#[test]
fn malformed_responses_are_rejected() {
    let cases: Vec<(Role, Value)> = vec![
        (Role::Translator, json!({"text": "wrong key"})),
        (Role::Embedder, json!({"vector": vec![0.5; 767]})),
        (Role::Embedder, json!({"vector": [1, "a"]})),
        (Role::Reward, json!({"score": "high"})),
        (Role::Fuser, json!({"error": "model crashed"})),
    ];
    for (role, body) in cases {
        let b = body.clone();
        let handler: StubHandler = Arc::new(move |_: &str, _: &Value| Ok(b.clone()));
        let server = StubServer::start("127.0.0.1:0", 1, handler).unwrap();
        let backend = Backend::http("bad", role, server.url(), quick(3, 2_000));
        let req = match role {
            Role::Translator => translate("x"),
            Role::Embedder => Request::Embed { text: "x".into() },
            Role::Reward => Request::Score {
                source: "s".into(),
                candidate: "c".into(),
            },
            _ => Request::Fuse {
                source: "s".into(),
                candidates: vec!["a".into()],
            },
        };
        let err = backend.call(&req, &CostLedger::new(), None).unwrap_err();
        assert!(matches!(err.kind, BackendErrorKind::Malformed(_)), "{body}: {err}");
        assert_eq!(err.attempts, 1);
    }
}

#[test]
fn role_mismatch_is_rejected_without_a_call() {
    let (server, hits) = upper_stub();
    let b = Backend::http("upper", Role::Translator, server.url(), quick(3, 1_000));
    let ledger = CostLedger::new();
    assert!(b.call(&Request::Embed { text: "x".into() }, &ledger, None).is_err());
    assert_eq!(ledger.total_calls(), 0);
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}

/// Every role of a mock pool served over HTTP and consumed by HTTP backends.
#[test]
fn pool_served_over_http_conforms_to_schema() {
    let corpus = ParallelCorpus::from_pairs([("a small test", "ek chhota test")]);
    let pool = Arc::new(make_mock_pool(&MockPoolKind::NoisyReference { dropout: None }, 4, 1, &corpus).unwrap());
    let server = StubServer::start("127.0.0.1:0", 2, pool_handler(pool.clone())).unwrap();
    let url = server.url();
    let ledger = CostLedger::new();
    let p = quick(1, 5_000);

    let local = pool.translate(2, 0, "a small test", &ledger).unwrap();
    let remote = Backend::http("t2", Role::Translator, format!("{url}/sys/2"), p)
        .call(&translate("a small test"), &ledger, None)
        .unwrap();
    assert_eq!(remote, Response::Translation(local));

    let v = Backend::http("emb", Role::Embedder, url.clone(), p)
        .call(&Request::Embed { text: "anything at all".into() }, &ledger, None)
        .unwrap()
        .into_vector()
        .unwrap();
    assert_eq!(v.len(), 768);

    let fused = Backend::http("fuse", Role::Fuser, url.clone(), p)
        .call(
            &Request::Fuse {
                source: "s".into(),
                candidates: vec!["x y".into(), "x y".into(), "z".into()],
            },
            &ledger,
            None,
        )
        .unwrap();
    assert_eq!(fused, Response::Translation("x y".into()));

    let score = Backend::http("rm", Role::Reward, url.clone(), p)
        .call(
            &Request::Score {
                source: "a small test".into(),
                candidate: "ek chhota test".into(),
            },
            &ledger,
            None,
        )
        .unwrap()
        .into_score()
        .unwrap();
    assert!(score.is_finite());

    let enhanced = Backend::http("llm", Role::Enhancer, url.clone(), p)
        .call(&Request::Enhance { prompt: "free text".into() }, &ledger, None);
    assert!(matches!(enhanced.unwrap_err().kind, BackendErrorKind::Status { status: 502, .. }));
    let prompt = ensemble_forge::ccb::build_enhancer_prompt("a small test", ("ek test", 0.2), &[], ("en", "hi"));
    let enhanced = Backend::http("llm", Role::Enhancer, url.clone(), p)
        .call(&Request::Enhance { prompt }, &ledger, None)
        .unwrap();
    assert_eq!(enhanced, Response::Translation("ek chhota test".into()));

    // bad bodies map to 400, unknown routes to 404
    let raw = |path: &str, body: Value| {
        let resp = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent()
            .post(&format!("{url}{path}"))
            .send_json(body)
            .unwrap();
        resp.status().as_u16()
    };
    assert_eq!(raw("/translate", json!({"source": 3})), 400);
    assert_eq!(raw("/nowhere", json!({})), 404);
    assert_eq!(raw("/sys/9/translate", json!({"source": "a", "src_lang": "en", "tgt_lang": "hi"})), 404);
}

#[test]
fn ledger_counts_match_invocations() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let counting = move |req: &Request| {
        h.fetch_add(1, Ordering::SeqCst);
        match req {
            Request::Translate { source, .. } => Ok(Response::Translation(source.clone())),
            _ => Err("translator only".to_owned()),
        }
    };
    let b = Backend::mock("count", Role::Translator, Arc::new(counting));
    let ledger = CostLedger::new();
    std::thread::scope(|s| {
        for t in 0..4 {
            let (b, ledger) = (&b, &ledger);
            s.spawn(move || {
                for i in 0..25 {
                    b.call(&translate("x"), ledger, Some(t * 100 + i)).unwrap();
                }
            });
        }
    });
    assert_eq!(hits.load(Ordering::SeqCst), 100);
    assert_eq!(ledger.backend("count").unwrap().calls, 100);
    assert_eq!(ledger.sentence_ids().len(), 100);
}

fn sh(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

#[test]
fn subprocess_speaks_json_lines() {
    // echo the op back inside the translation
    let script = r#"while read -r line; do
        op=$(printf '%s' "$line" | sed 's/.*"op":"\([a-z]*\)".*/\1/')
        printf '{"translation":"%s"}\n' "$op"
    done"#;
    let b = Backend::subprocess("shell", Role::Translator, sh(script), quick(1, 5_000));
    let ledger = CostLedger::new();
    for _ in 0..3 {
        let out = b.call(&translate("x"), &ledger, None).unwrap();
        assert_eq!(out, Response::Translation("translate".into()));
    }
    assert_eq!(ledger.total_calls(), 3);
}

#[test]
fn subprocess_failures_are_classified() {
    let ledger = CostLedger::new();
    let silent = Backend::subprocess("silent", Role::Translator, sh("sleep 5"), quick(1, 100));
    assert_eq!(silent.call(&translate("x"), &ledger, None).unwrap_err().kind, BackendErrorKind::Timeout);

    let dies = Backend::subprocess("dies", Role::Translator, sh("read -r l; exit 3"), quick(1, 5_000));
    assert_eq!(dies.call(&translate("x"), &ledger, None).unwrap_err().kind, BackendErrorKind::Exited(Some(3)));

    let garbage = Backend::subprocess("garbage", Role::Translator, sh("read -r l; echo not-json; sleep 1"), quick(1, 5_000));
    assert!(matches!(
        garbage.call(&translate("x"), &ledger, None).unwrap_err().kind,
        BackendErrorKind::Malformed(_)
    ));

    let missing = Backend::subprocess("missing", Role::Translator, vec!["/nonexistent/bin".into()], quick(1, 100));
    assert!(matches!(
        missing.call(&translate("x"), &ledger, None).unwrap_err().kind,
        BackendErrorKind::Transport(_)
    ));
}

#[test]
fn request_bodies_are_fixed() {
    assert_eq!(
        translate("a").to_json(),
        json!({"source": "a", "src_lang": "en", "tgt_lang": "hi"})
    );
    for path in ["/translate", "/fuse", "/enhance", "/embed", "/score"] {
        assert!(Request::from_json(path, &json!({})).is_err());
    }
    let req = Request::Score {
        source: "s".into(),
        candidate: "c".into(),
    };
    assert_eq!(Request::from_json("/score", &req.to_json()).unwrap(), req);
}
