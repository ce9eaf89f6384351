use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::process::{Command, Stdio};
use std::sync::Arc;

use concept_search::index::{Engine, Index};
use concept_search_cli::server::{router, Health, SearchRequest};
use serde_json::{json, Value};

fn start(index: Arc<Index>) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(index)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

const CORPUS: &str = concat!(
    "{\"id\":\"merge\",\"code\":\"def merge(a, b):\\n    out = dict(a)\\n    out.update(b)\\n    return out\",\"language\":\"python\"}\n",
    "{\"id\":\"sort\",\"source\":\"function sortDesc(xs) {\\n  return xs.sort((a, b) => b - a);\\n}\",\"language\":\"javascript\"}\n",
);

#[test]
fn health_index_and_search() {
    let index = Arc::new(Index::in_memory(Arc::new(Engine::hashed(64, 0x5eed, 17))));
    let base = format!("http://{}", start(index));
    let a = agent();

    let health: Health = a.get(format!("{base}/v1/health")).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.entries, 0);
    assert_eq!(health.provider.dimension, 64);

    let req = SearchRequest { query: "merge dictionaries".into(), top_k: 5, delta_highlight: None, delta_cluster: None };
    let empty: Value = a.post(format!("{base}/v1/search")).send_json(&req).unwrap().body_mut().read_json().unwrap();
    assert_eq!(empty["results"], json!([]));
    assert_eq!(empty["diagnostics"], json!(["index is empty"]));

    let mut resp = a.post(format!("{base}/v1/index")).send(CORPUS).unwrap();
    assert_eq!(resp.status(), 200);
    let stats: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(stats["ingested"], 2);
    assert_eq!(stats["entries"], 2);

    let mut resp = a.post(format!("{base}/v1/search")).send_json(&req).unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.body_mut().read_json().unwrap();
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[0]["score"].as_f64().unwrap() >= results[1]["score"].as_f64().unwrap());
    let query = "merge dictionaries";
    for c in body["concepts"].as_array().unwrap() {
        for span in c["token_spans"].as_array().unwrap() {
            let (s, e) = (span[0].as_u64().unwrap() as usize, span[1].as_u64().unwrap() as usize);
            assert!(s < e && e <= query.chars().count());
        }
    }
    assert!(body.get("stats").is_none());
}

#[test]
fn bad_requests_get_json_errors() {
    let index = Arc::new(Index::in_memory(Arc::new(Engine::hashed(16, 1, 2))));
    let base = format!("http://{}", start(index));
    let a = agent();

    let mut resp = a
        .post(format!("{base}/v1/search"))
        .send_json(json!({"query": "x", "top_k": 0}))
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.body_mut().read_json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("top_k"));

    let resp = a
        .post(format!("{base}/v1/search"))
        .send_json(json!({"query": "x", "top_k": 3, "delta_cluster": 0.0}))
        .unwrap();
    assert_eq!(resp.status(), 400);

    let resp = a.post(format!("{base}/v1/index")).send("{\"id\": 1}\n").unwrap();
    assert_eq!(resp.status(), 400);

    let dup = "{\"id\":\"a\",\"code\":\"x = 1\"}\n{\"id\":\"a\",\"code\":\"y = 2\"}\n";
    let resp = a.post(format!("{base}/v1/index")).send(dup).unwrap();
    assert_eq!(resp.status(), 400);

    // malformed JSON bodies are rejected by the extractor
    let resp = a
        .post(format!("{base}/v1/search"))
        .header("content-type", "application/json")
        .send("{")
        .unwrap();
    assert!(resp.status().is_client_error());
}

#[test]
fn serve_command_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_concept-search"))
        .args(["serve", dir.path().join("idx").to_str().unwrap(), "--port", "0"])
        .env_remove("CONCEPT_SEARCH_CONFIG")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    let health: Value = agent().get(format!("{url}/v1/health")).call().unwrap().body_mut().read_json().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["entries"], 0);
}
