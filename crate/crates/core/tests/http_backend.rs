use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use annoloop_core::backend::{Backend, BackendError, ChatMessage, GenerationParams, HttpBackend, RetryPolicy};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                auth,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(5),
    }
}

fn chat_ok(text: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
    )
}

fn messages() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("sys"),
        ChatMessage::assistant("ex"),
        ChatMessage::user("hi"),
    ]
}

#[test]
fn chat_request_shape() {
    let (url, seen, handle) = serve(vec![chat_ok("hello")]);
    let backend = HttpBackend::new(url, Some("k-123".into()), fast_retry()).unwrap();
    let out = backend
        .chat(&messages(), &GenerationParams::new("gpt-x", 0.0, 350))
        .unwrap();
    handle.join().unwrap();
    assert_eq!(out, "hello");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer k-123"));
    assert_eq!(seen[0].body["model"], "gpt-x");
    assert_eq!(seen[0].body["max_tokens"], 350);
    assert_eq!(seen[0].body["temperature"], 0.0);
    let roles: Vec<&str> = seen[0].body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["system", "assistant", "user"]);
}

#[test]
fn retries_on_429_and_5xx() {
    let (url, seen, handle) = serve(vec![(429, "{}".into()), (503, "{}".into()), chat_ok("third time")]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let out = backend.chat(&messages(), &GenerationParams::new("m", 1.0, 10)).unwrap();
    handle.join().unwrap();
    assert_eq!(out, "third time");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, seen, handle) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let err = backend
        .chat(&messages(), &GenerationParams::new("m", 1.0, 10))
        .unwrap_err();
    handle.join().unwrap();
    assert!(
        matches!(err, BackendError::Http { status: 500, ref body } if body == "c"),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = serve(vec![(400, "bad request".into())]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let err = backend
        .chat(&messages(), &GenerationParams::new("m", 1.0, 10))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Http { status: 400, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn embeddings_are_ordered_by_index() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]})
    .to_string();
    let (url, seen, handle) = serve(vec![(200, body)]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let v = Backend::embed(&backend, "emb", &["a".into(), "b".into()]).unwrap();
    handle.join().unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["input"], serde_json::json!(["a", "b"]));
}

#[test]
fn embedding_count_mismatch_is_malformed() {
    let body = serde_json::json!({"data": [{"index": 0, "embedding": [1.0]}]}).to_string();
    let (url, _, handle) = serve(vec![(200, body)]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let err = Backend::embed(&backend, "emb", &["a".into(), "b".into()]).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
}

#[test]
fn missing_content_is_malformed() {
    let (url, _, handle) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let backend = HttpBackend::new(url, Some("k".into()), fast_retry()).unwrap();
    let err = backend
        .chat(&messages(), &GenerationParams::new("m", 0.0, 10))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
}
