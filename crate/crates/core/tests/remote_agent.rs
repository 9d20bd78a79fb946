use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use histogen_core::annotate::*;
use histogen_core::io::decode_tensors;
use histogen_core::synthdata::{gen_sample, split_patches};
use histogen_core::{Error, Tensor};
use serde_json::{json, Value};

enum Reply {
    Json(u16, String),
    Hang(Duration),
}

/// Serves scripted replies in order, repeating the last one, and records
/// every request body.
struct Server {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
}

fn serve(script: Vec<Reply>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/agent", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(Value::Null));
            match &script[i.min(script.len() - 1)] {
                Reply::Json(status, text) => {
                    let head = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        text.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(text.as_bytes());
                }
                Reply::Hang(d) => thread::sleep(*d),
            }
        }
    });
    Server { url, bodies }
}

fn endpoint(server: &Server, retries: u32) -> AgentEndpoint {
    AgentEndpoint::Remote(RemoteEndpoint {
        url: server.url.clone(),
        timeout_ms: 2_000,
        max_retries: retries,
    })
}

fn ok(v: Value) -> Reply {
    Reply::Json(200, v.to_string())
}

fn patch() -> Tensor {
    split_patches(&gen_sample(3).image, 16, 16).unwrap().remove(0)
}

fn steps_json() -> Value {
    let mut f = vec![0.0; STEP_FEATURES];
    f[0] = 1.0;
    f[3] = 4.0;
    json!({ "steps": [["4 nuclei detected", f]] })
}

#[test]
fn step_request_carries_role_prompt_and_patch() {
    let server = serve(vec![ok(steps_json())]);
    let p = patch();
    let chain = run_step_agent("patch_0000", &p, &endpoint(&server, 0)).unwrap();
    assert_eq!(chain.steps.len(), 1);
    assert_eq!(chain.steps[0].statement, "4 nuclei detected");
    assert_eq!(chain.steps[0].value(), Some(4.0));

    let body = server.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["role"], "step");
    assert!(!body["prompt"].as_str().unwrap().is_empty());
    let bytes = BASE64.decode(body["patch"].as_str().unwrap()).unwrap();
    let sent = decode_tensors(&bytes).unwrap();
    assert_eq!(sent[0].0, "patch");
    assert_eq!(sent[0].1.shape(), p.shape());
    for (a, b) in sent[0].1.data().iter().zip(p.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn server_errors_are_retried() {
    let server = serve(vec![
        Reply::Json(503, "{}".into()),
        Reply::Json(500, "{}".into()),
        ok(steps_json()),
    ]);
    assert!(run_step_agent("p", &patch(), &endpoint(&server, 2)).is_ok());
    assert_eq!(server.bodies.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let server = serve(vec![Reply::Json(503, "{}".into())]);
    let err = run_step_agent("p", &patch(), &endpoint(&server, 1)).unwrap_err();
    assert!(matches!(err, Error::Agent { ref patch_id, .. } if patch_id == "p"), "{err}");
    assert_eq!(server.bodies.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(vec![Reply::Json(400, "{}".into()), ok(steps_json())]);
    assert!(run_step_agent("p", &patch(), &endpoint(&server, 3)).is_err());
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn malformed_and_empty_responses_fail() {
    let server = serve(vec![Reply::Json(200, "not json".into())]);
    assert!(matches!(run_step_agent("p", &patch(), &endpoint(&server, 0)), Err(Error::Agent { .. })));
    let server = serve(vec![ok(json!({ "steps": [] }))]);
    assert!(run_step_agent("p", &patch(), &endpoint(&server, 0)).is_err());
    let server = serve(vec![ok(json!({ "text": "  " }))]);
    let chain = mock_step("p", &patch()).unwrap();
    assert!(describe_patch("p", &patch(), 1, &chain, &endpoint(&server, 0)).is_err());
}

#[test]
fn judge_scores_are_clamped() {
    let chain = mock_step("p", &patch()).unwrap();
    for (raw, want) in [(1.7, 1.0), (-0.2, 0.0), (0.4, 0.4)] {
        let server = serve(vec![ok(json!({ "score": raw }))]);
        let q = judge("p", &patch(), &chain, 0, "text", &endpoint(&server, 0)).unwrap();
        assert_eq!(q, want);
        let body = server.bodies.lock().unwrap()[0].clone();
        assert_eq!(body["role"], "judge");
        assert_eq!(body["context"]["description"], "text");
        assert_eq!(body["context"]["steps"].as_array().unwrap().len(), chain.steps.len());
    }
    let server = serve(vec![ok(json!({ "text": "no score" }))]);
    assert!(judge("p", &patch(), &chain, 0, "text", &endpoint(&server, 0)).is_err());
}

#[test]
fn slow_agent_times_out() {
    let server = serve(vec![Reply::Hang(Duration::from_secs(3))]);
    let ep = AgentEndpoint::Remote(RemoteEndpoint {
        url: server.url.clone(),
        timeout_ms: 200,
        max_retries: 0,
    });
    let start = std::time::Instant::now();
    assert!(run_step_agent("p", &patch(), &ep).is_err());
    assert!(start.elapsed() < Duration::from_secs(2));
}

#[test]
fn unreachable_endpoint_is_an_agent_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let ep = AgentEndpoint::Remote(RemoteEndpoint {
        url,
        timeout_ms: 500,
        max_retries: 1,
    });
    assert!(matches!(run_step_agent("p", &patch(), &ep), Err(Error::Agent { .. })));
}

#[test]
fn skip_policy_keeps_going_past_bad_patches() {
    // wrong feature width: the aggregator rejects every chain
    let server = serve(vec![ok(json!({ "steps": [["odd", [1.0, 2.0]]] }))]);
    let image = gen_sample(5).image;
    let mut config = PipelineConfig::mock(16);
    config.endpoints.step = endpoint(&server, 0);
    config.policy = ErrorPolicy::SkipAndLog;
    let out = run_pipeline(&image, &config).unwrap();
    assert!(out.records.is_empty());
    let ids: Vec<&str> = out.skipped.iter().map(|s| s.patch_id.as_str()).collect();
    assert_eq!(ids, ["patch_0000", "patch_0001", "patch_0002", "patch_0003"]);
    config.policy = ErrorPolicy::Abort;
    assert!(run_pipeline(&image, &config).is_err());
}
