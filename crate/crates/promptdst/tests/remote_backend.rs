//! Wire-protocol tests for the remote backend against a minimal in-process
//! HTTP server: request/response round trips, service error bodies,
//! transport retries, and training job polling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use promptdst::backend::{
    BackendError, FineTuneConfig, GenerationParams, LmBackend, LossSpec, RemoteBackend,
    RemoteConfig,
};

/// One observed request: endpoint path and parsed JSON body.
#[derive(Debug, Clone)]
struct Seen {
    path: String,
    body: Value,
}

/// What the server does with an accepted connection.
enum Action {
    /// Respond with this HTTP status and JSON body.
    Respond(u16, Value),
    /// Drop the connection without responding (transport failure).
    Hangup,
}

struct Server {
    port: u16,
    seen: Arc<Mutex<Vec<Seen>>>,
    shutdown: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    /// Serves connections with `handler` until the listener is dropped at
    /// the end of the test. The handler sees the request path and body plus
    /// the index of the request (0-based) and decides the action.
    fn start(
        handler: impl Fn(usize, &str, &Value) -> Action + Send + 'static,
    ) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind test listener");
        let port = listener.local_addr().unwrap().port();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen_in_thread = Arc::clone(&seen);
        let shutdown = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let shutdown_in_thread = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            for (index, stream) in listener.incoming().enumerate() {
                if shutdown_in_thread.load(std::sync::atomic::Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { break };
                let Some((path, body)) = read_request(&mut stream) else {
                    continue;
                };
                seen_in_thread.lock().unwrap().push(Seen {
                    path: path.clone(),
                    body: body.clone(),
                });
                match handler(index, &path, &body) {
                    Action::Respond(status, value) => write_response(&mut stream, status, &value),
                    Action::Hangup => drop(stream),
                }
            }
        });
        Self { port, seen, shutdown, handle: Some(handle) }
    }

    fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        // Unblock the accept loop so the thread can exit.
        self.shutdown.store(true, std::sync::atomic::Ordering::SeqCst);
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let path = request_line.split_whitespace().nth(1)?.to_string();

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().ok()?;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    let body = serde_json::from_slice(&body).ok()?;
    Some((path, body))
}

fn write_response(stream: &mut TcpStream, status: u16, body: &Value) {
    let body = body.to_string();
    let reason = if status < 400 { "OK" } else { "Error" };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}

fn backend(server: &Server) -> RemoteBackend<f64> {
    let mut config = RemoteConfig::new(server.base_url(), "test-model");
    config.poll_interval = Duration::from_millis(10);
    config.request_timeout = Duration::from_secs(5);
    RemoteBackend::new(config).unwrap()
}

#[test]
fn score_mask_round_trip() {
    let server = Server::start(|_, path, _| {
        assert_eq!(path, "/score-mask");
        Action::Respond(
            200,
            json!({
                "per_mask_scores": [
                    {"hotel": 0.9, "train": 0.1},
                    {"hotel": 0.3, "train": 0.7}
                ]
            }),
        )
    });
    let backend = backend(&server);
    let result = backend
        .mask_fill(
            "dh [MASK] and the [MASK].",
            &["hotel".to_string(), "train".to_string()],
        )
        .unwrap();
    assert_eq!(result.per_mask_scores.len(), 2);
    assert_eq!(result.per_mask_scores[0]["hotel"], 0.9);
    assert_eq!(result.per_mask_scores[1]["train"], 0.7);

    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/score-mask");
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["input"], "dh [MASK] and the [MASK].");
    assert_eq!(seen[0].body["candidates"], json!(["hotel", "train"]));
}

#[test]
fn generate_round_trip() {
    let server = Server::start(|_, path, _| {
        assert_eq!(path, "/generate");
        Action::Respond(200, json!({"text": "hotel, train", "token_count": 3}))
    });
    let backend = backend(&server);
    let result = backend.generate("dh What are the mentioned domains?", &GenerationParams::beam5())
        .unwrap();
    assert_eq!(result.text, "hotel, train");
    assert_eq!(result.token_count, 3);

    let seen = server.requests();
    assert_eq!(seen[0].body["beam_size"], 5);
    assert_eq!(seen[0].body["max_new_tokens"], 32);
    assert_eq!(seen[0].body["suppress_eos_until"], 0);
}

#[test]
fn first_token_round_trip() {
    let server = Server::start(|_, path, _| {
        assert_eq!(path, "/first-token");
        Action::Respond(200, json!({"scores": {"monday": 0.2, "tuesday": 0.6}}))
    });
    let backend = backend(&server);
    let scores: BTreeMap<String, f64> = backend
        .first_token_distribution("dh Which day?", &["monday".to_string(), "tuesday".to_string()])
        .unwrap();
    assert_eq!(scores["monday"], 0.2);
    assert_eq!(scores["tuesday"], 0.6);
    assert_eq!(
        server.requests()[0].body["first_tokens"],
        json!(["monday", "tuesday"])
    );
}

#[test]
fn service_error_body_is_surfaced_and_not_retried() {
    let server = Server::start(|_, _, _| {
        Action::Respond(400, json!({"error": "unknown model 'test-model'"}))
    });
    let backend = backend(&server);
    let err = backend
        .mask_fill("dh [MASK]", &["hotel".to_string()])
        .unwrap_err();
    match err {
        BackendError::Service(message) => assert_eq!(message, "unknown model 'test-model'"),
        other => panic!("expected service error, got {other}"),
    }
    // Service-level failures must not burn retries.
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn transport_failures_are_retried() {
    // First two connections hang up; the third answers.
    let server = Server::start(|index, _, _| {
        if index < 2 {
            Action::Hangup
        } else {
            Action::Respond(200, json!({"per_mask_scores": [{"hotel": 1.0}]}))
        }
    });
    let backend = backend(&server);
    let result = backend.mask_fill("dh [MASK]", &["hotel".to_string()]).unwrap();
    assert_eq!(result.per_mask_scores[0]["hotel"], 1.0);
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn transport_failure_after_retry_budget_errors() {
    let server = Server::start(|_, _, _| Action::Hangup);
    let backend = backend(&server);
    let err = backend.mask_fill("dh [MASK]", &["hotel".to_string()]).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "got {err}");
    // Initial attempt plus max_retries.
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn training_polls_until_done_and_switches_model() {
    let polls = Arc::new(Mutex::new(0usize));
    let polls_in_handler = Arc::clone(&polls);
    let server = Server::start(move |_, path, body| match path {
        "/train" => Action::Respond(200, json!({"job_id": "job-7"})),
        "/train-status" => {
            assert_eq!(body["job_id"], "job-7");
            let mut n = polls_in_handler.lock().unwrap();
            *n += 1;
            if *n < 3 {
                Action::Respond(200, json!({"status": "running"}))
            } else {
                Action::Respond(200, json!({"status": "done", "model": "test-model-tuned"}))
            }
        }
        other => panic!("unexpected endpoint {other}"),
    });

    let backend = backend(&server);
    let dataset = vec![("prompt text".to_string(), "hotel".to_string())];
    let tuned = backend
        .fine_tune(
            &dataset,
            &LossSpec::nll_plus_ul_eos(1.0),
            &FineTuneConfig::clm_defaults(),
        )
        .unwrap();
    assert_eq!(tuned.model_id(), "test-model-tuned");
    assert_eq!(*polls.lock().unwrap(), 3);
}

#[test]
fn training_failure_reports_message() {
    let server = Server::start(|_, path, _| match path {
        "/train" => Action::Respond(200, json!({"job_id": "job-9"})),
        "/train-status" => {
            Action::Respond(200, json!({"status": "failed", "message": "diverged at epoch 3"}))
        }
        other => panic!("unexpected endpoint {other}"),
    });
    let backend = backend(&server);
    let dataset = vec![("x".to_string(), "y".to_string())];
    match backend.fine_tune(&dataset, &LossSpec::nll(), &FineTuneConfig::clm_defaults()) {
        Err(BackendError::TrainingFailed(message)) => {
            assert_eq!(message, "diverged at epoch 3")
        }
        Err(other) => panic!("expected training failure, got {other}"),
        Ok(_) => panic!("expected training failure, got success"),
    }
}

#[test]
fn train_request_carries_loss_config_and_idempotency_id() {
    let server = Server::start(|_, path, body| match path {
        "/train" => {
            assert_eq!(body["model"], "test-model");
            assert!(body["request_id"].as_str().is_some_and(|s| !s.is_empty()));
            assert_eq!(body["dataset"][0][0], "prompt text");
            assert_eq!(body["dataset"][0][1], "hotel");
            assert_eq!(body["loss"]["kind"], "nll_plus_ul_eos");
            assert_eq!(body["config"]["epochs"], 50);
            Action::Respond(200, json!({"job_id": "job-1"}))
        }
        "/train-status" => Action::Respond(200, json!({"status": "done"})),
        other => panic!("unexpected endpoint {other}"),
    });
    let backend = backend(&server);
    let dataset = vec![("prompt text".to_string(), "hotel".to_string())];
    let tuned = backend
        .fine_tune(
            &dataset,
            &LossSpec::nll_plus_ul_eos(1.0),
            &FineTuneConfig::clm_defaults(),
        )
        .unwrap();
    // Without a model in the done status the handle keeps the base model.
    assert_eq!(tuned.model_id(), "test-model");
}
