use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use visir::corpus::{DomainCategory, Screenshot};
use visir::embedding::{remote_embed, EmbedderBackend, EmbeddingError, RemoteConfig, RemoteEmbedder, RemoteInput};

/// Serves the scripted `(status, body)` responses in order, one per
/// connection, and records each request body.
fn stub(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push(String::from_utf8(req).unwrap());
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn cfg(endpoint: String, dim: usize) -> RemoteConfig {
    RemoteConfig {
        endpoint,
        dim,
        max_retries: 3,
        timeout_secs: 5,
        batch_size: 2,
    }
}

#[test]
fn fixed_vector_is_normalized() {
    let (url, seen) = stub(vec![(200, r#"{"vectors":[[3.0,4.0]]}"#.into())]);
    let out = remote_embed(&cfg(url, 2), &[RemoteInput::Text("hello".into())]).unwrap();
    assert_eq!(out[0].values(), &[0.6f32, 0.8]);
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["modality"], "text");
    assert_eq!(body["inputs"][0], "hello");
}

#[test]
fn wrong_dimension_is_rejected() {
    let (url, _) = stub(vec![(200, r#"{"vectors":[[1.0,0.0,0.0]]}"#.into())]);
    let err = remote_embed(&cfg(url, 2), &[RemoteInput::Text("x".into())]).unwrap_err();
    assert!(matches!(err, EmbeddingError::DimensionMismatch { expected: 2, found: 3 }));
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = stub(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, r#"{"vectors":[[0.0,2.0]]}"#.into()),
    ]);
    let out = remote_embed(&cfg(url, 2), &[RemoteInput::Text("x".into())]).unwrap();
    assert_eq!(out[0].values(), &[0.0f32, 1.0]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = stub(vec![(503, "{}".into()); 3]);
    let c = RemoteConfig {
        max_retries: 2,
        ..cfg(url, 2)
    };
    let err = remote_embed(&c, &[RemoteInput::Text("x".into())]).unwrap_err();
    assert!(matches!(err, EmbeddingError::Network { attempts: 3, .. }));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, "{}".into()), (200, r#"{"vectors":[[1.0,0.0]]}"#.into())]);
    let err = remote_embed(&cfg(url, 2), &[RemoteInput::Text("x".into())]).unwrap_err();
    assert!(matches!(err, EmbeddingError::Malformed(_)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_reports_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = RemoteConfig {
        max_retries: 1,
        ..cfg(format!("http://127.0.0.1:{port}/embed"), 2)
    };
    let err = remote_embed(&c, &[RemoteInput::Text("x".into())]).unwrap_err();
    assert!(matches!(err, EmbeddingError::Network { attempts: 2, .. }));
}

#[test]
fn batches_are_chunked_in_order() {
    let (url, seen) = stub(vec![
        (200, r#"{"vectors":[[1.0,0.0],[0.0,1.0]]}"#.into()),
        (200, r#"{"vectors":[[1.0,1.0]]}"#.into()),
    ]);
    let backend = RemoteEmbedder::new(cfg(url, 2)).unwrap();
    let out = backend.embed_texts(&["a", "b", "c"]).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[1].values(), &[0.0f32, 1.0]);
    assert!((out[2].values()[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 2);
    assert!(bodies[1].contains("\"c\""));
}

#[test]
fn screenshots_are_sent_by_image_ref() {
    let (url, seen) = stub(vec![(200, r#"{"vectors":[[1.0,0.0]]}"#.into())]);
    let backend = RemoteEmbedder::new(cfg(url, 2)).unwrap();
    let s = Screenshot::new("s1", DomainCategory::News, "file:///shots/s1.png", 10, 10, "c");
    backend.embed_screenshot(&s).unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["modality"], "image");
    assert_eq!(body["inputs"][0], "file:///shots/s1.png");
}

#[test]
fn empty_and_mixed_batches_are_rejected() {
    let c = cfg("http://127.0.0.1:9/embed".into(), 2);
    assert!(matches!(remote_embed(&c, &[]), Err(EmbeddingError::InvalidInput(_))));
    let mixed = [RemoteInput::Text("a".into()), RemoteInput::Image("b".into())];
    assert!(matches!(remote_embed(&c, &mixed), Err(EmbeddingError::InvalidInput(_))));
}
