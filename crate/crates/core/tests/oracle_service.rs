mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::Duration;

use common::{FailingAfter, Setup};
use promptdfo::oracle::server::{spawn_server, ServerOptions};
use promptdfo::oracle::wire::encode_response;
use promptdfo::oracle::{Backend, Oracle, OracleRequest, RemoteBackend, RemoteConfig};
use promptdfo::task::evaluate_batch;
use promptdfo::OracleError;

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn request(s: &Setup, scale: f64, id: u64) -> OracleRequest {
    let info = s.oracle.info();
    OracleRequest {
        prompts: (0..info.layers)
            .map(|l| (0..info.prompt_dim).map(|i| scale * ((i + 3 * l) as f64).sin()).collect())
            .collect(),
        batch: s.train.clone(),
        id,
    }
}

fn remote(endpoint: String, s: &Setup) -> Oracle {
    let mut cfg = RemoteConfig::new(endpoint, s.oracle.info());
    cfg.backoff = Duration::from_millis(1);
    cfg.timeout = Duration::from_secs(10);
    Oracle::new(Arc::new(RemoteBackend::new(cfg).unwrap()))
}

/// Serves the given `(status, body)` answers in order, one per connection.
fn canned(answers: Vec<(u16, String)>) -> String {
    let listener = TcpListener::bind(loopback()).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for (status, body) in answers {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body_in = vec![0; len];
            reader.read_exact(&mut body_in).unwrap();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    format!("http://{addr}/v1/evaluate")
}

#[test]
fn loopback_matches_in_process() {
    let s = Setup::tiny(2, 3);
    let server = spawn_server(s.oracle.backend().clone(), loopback(), ServerOptions::default()).unwrap();
    let client = remote(server.endpoint(), &s);
    for (k, scale) in [0.0, 0.3, 2.0].into_iter().enumerate() {
        let req = request(&s, scale, k as u64);
        let local = s.oracle.evaluate(&req).unwrap();
        let far = client.evaluate(&req).unwrap();
        assert_eq!(local.probs, far.probs);
        assert_eq!(local.loss, far.loss);
        let a = evaluate_batch(&s.oracle, &req, &s.task.manual).unwrap();
        let b = evaluate_batch(&client, &req, &s.task.manual).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-9);
    }
    assert_eq!(client.calls(), 6);
    assert_eq!(server.calls(), 6);
    server.shutdown().unwrap();
}

#[test]
fn server_error_then_success_counts_one_call() {
    let s = Setup::tiny(2, 3);
    let req = request(&s, 0.5, 1);
    let good = encode_response(&s.oracle.fork().evaluate(&req).unwrap()).unwrap();
    let endpoint = canned(vec![(503, r#"{"error":"busy"}"#.into()), (500, "oops".into()), (200, good)]);
    let client = remote(endpoint, &s);
    let got = client.evaluate(&req).unwrap();
    assert_eq!(client.calls(), 1);
    assert_eq!(got.calls, 1);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let s = Setup::tiny(2, 3);
    let endpoint = canned(vec![(503, r#"{"error":"down"}"#.into()); 4]);
    let client = remote(endpoint, &s);
    match client.evaluate(&request(&s, 0.5, 1)) {
        Err(OracleError::Unavailable { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(last.contains("down"), "{last}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(client.calls(), 0);
}

#[test]
fn malformed_response_is_a_protocol_error() {
    let s = Setup::tiny(2, 3);
    let endpoint = canned(vec![(200, r#"{"probs": "nope"}"#.into())]);
    let client = remote(endpoint, &s);
    assert!(matches!(client.evaluate(&request(&s, 0.5, 1)), Err(OracleError::Protocol(_))));
    assert_eq!(client.calls(), 0);
}

#[test]
fn client_errors_are_not_retried() {
    let s = Setup::tiny(2, 3);
    let endpoint = canned(vec![(400, r#"{"error":"bad shape"}"#.into())]);
    let client = remote(endpoint, &s);
    match client.evaluate(&request(&s, 0.5, 1)) {
        Err(OracleError::Rejected(msg)) => assert!(msg.contains("bad shape"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let s = Setup::tiny(2, 3);
    let port = TcpListener::bind(loopback()).unwrap().local_addr().unwrap().port();
    let client = remote(format!("http://127.0.0.1:{port}/v1/evaluate"), &s);
    assert!(matches!(client.evaluate(&request(&s, 0.5, 1)), Err(OracleError::Unavailable { .. })));
}

#[test]
fn malformed_request_gets_400_and_no_count() {
    let s = Setup::tiny(2, 3);
    let server = spawn_server(s.oracle.backend().clone(), loopback(), ServerOptions::default()).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    for body in ["not json", r#"{"version":1,"prompts":[[1.0]],"batch":[]}"#] {
        let mut resp = agent.post(&server.endpoint()).send(body).unwrap();
        assert_eq!(resp.status().as_u16(), 400);
        let text = resp.body_mut().read_to_string().unwrap();
        assert!(text.contains("\"error\""), "{text}");
    }
    // Well-formed JSON with the wrong shape is rejected by the backend.
    let mut bad = request(&s, 0.5, 1);
    bad.prompts.pop();
    let body = promptdfo::oracle::wire::encode_request(&bad).unwrap();
    let resp = agent.post(&server.endpoint()).send(&body).unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    assert_eq!(server.calls(), 0);
}

#[test]
fn backend_outage_maps_to_503() {
    let s = Setup::tiny(2, 3);
    let flaky: Arc<dyn Backend> = Arc::new(FailingAfter {
        inner: s.oracle.backend().clone(),
        ok: 0,
        seen: AtomicU64::new(0),
    });
    let server = spawn_server(flaky, loopback(), ServerOptions::default()).unwrap();
    let client = remote(server.endpoint(), &s);
    assert!(matches!(client.evaluate(&request(&s, 0.5, 1)), Err(OracleError::Unavailable { .. })));
}

#[test]
fn concurrent_clients_are_all_counted() {
    let s = Setup::tiny(2, 3);
    let server = spawn_server(s.oracle.backend().clone(), loopback(), ServerOptions::default()).unwrap();
    let clients: Vec<Oracle> = (0..2).map(|_| remote(server.endpoint(), &s)).collect();
    std::thread::scope(|scope| {
        for (c, client) in clients.iter().enumerate() {
            let s = &s;
            scope.spawn(move || {
                for k in 0..10 {
                    let req = request(s, 0.1 * (k + 1) as f64, k);
                    let got = client.evaluate(&req).unwrap();
                    let want = s.oracle.backend().forward(&req).unwrap();
                    assert_eq!(got.probs, want.probs, "client {c} call {k}");
                }
            });
        }
    });
    assert_eq!(clients.iter().map(Oracle::calls).sum::<u64>(), 20);
    assert_eq!(server.calls(), 20);
}

#[test]
fn busy_port_is_reported() {
    let s = Setup::tiny(2, 3);
    let first = spawn_server(s.oracle.backend().clone(), loopback(), ServerOptions::default()).unwrap();
    let err = spawn_server(s.oracle.backend().clone(), first.local_addr(), ServerOptions::default());
    assert!(err.is_err());
}
