use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_concept-search"));
    c.env_remove("CONCEPT_SEARCH_CONFIG")
        .env_remove("CONCEPT_SEARCH_PROVIDER")
        .env_remove("CONCEPT_SEARCH_ENDPOINT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// A three-file corpus plus a notes file that should be skipped.
fn corpus(dir: &Path) -> PathBuf {
    let root = dir.join("corpus");
    fs::create_dir_all(root.join("util")).unwrap();
    fs::write(root.join("util/merge.py"), "def merge(a, b):\n    out = dict(a)\n    out.update(b)\n    return out\n").unwrap();
    fs::write(root.join("read.go"), "func Load(path string) ([]byte, error) {\n\treturn os.ReadFile(path)\n}\n").unwrap();
    fs::write(root.join("sort.js"), "function sortDesc(xs) {\n  return xs.slice().sort((a, b) => b - a);\n}\n").unwrap();
    fs::write(root.join("README.txt"), "not code").unwrap();
    root
}

fn indexed(dir: &Path) -> PathBuf {
    let out = dir.join("idx");
    let o = run(&["index", corpus(dir).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn index_then_search() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("idx");
    let o = run(&["index", corpus(dir.path()).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ingested 3"), "{}", stdout(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("README.txt"));
    assert!(out.join("manifest.json").exists());

    let o = run(&["search", out.to_str().unwrap(), "--query", "merge two dictionaries", "--json", "--top-k", "2"]);
    assert!(o.status.success());
    let resp: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let results = resp["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for hit in results {
        let lines = hit["source"].as_str().unwrap().lines().count();
        for m in hit["matches"].as_array().unwrap() {
            assert!((m["line"].as_u64().unwrap() as usize) < lines);
        }
    }
    for c in resp["concepts"].as_array().unwrap() {
        assert!(!c["token_spans"].as_array().unwrap().is_empty());
    }

    let o = run(&["search", out.to_str().unwrap(), "--query", "merge two dictionaries"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("score"));
}

#[test]
fn eval_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = indexed(dir.path());
    let bench = dir.path().join("bench.jsonl");
    fs::write(
        &bench,
        "{\"query\":\"sort numbers descending\",\"relevant_ids\":[\"sort.js\"]}\n\
         {\"query\":\"read a file\",\"relevant_ids\":[\"read.go\",\"missing.rb\"]}\n",
    )
    .unwrap();
    let o = run(&["eval", out.to_str().unwrap(), bench.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let mrr = report["mrr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mrr));
    assert!(report["mmrr"].as_f64().unwrap() >= mrr);
    assert_eq!(report["skipped"], 1);

    let o = run(&["eval", out.to_str().unwrap(), bench.to_str().unwrap(), "--metric", "mrr"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("MRR") && !stdout(&o).contains("MMRR"));
}

#[test]
fn validate_annotations_exit_codes() {
    let good = fixtures().join("annotations.jsonl");
    let o = run(&["validate-annotations", good.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("3 records: 3 pass"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    let mut text = fs::read_to_string(&good).unwrap();
    text.push_str("{\"id\": \"half\", \"query\": \"x\"}\n");
    fs::write(&bad, text).unwrap();
    let o = run(&["validate-annotations", bad.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["counts"]["format_fail"], 1);
    assert_eq!(report["outcomes"][3]["record_id"], "half");
}

#[test]
fn loss_check_passes() {
    let o = run(&["loss-check", "--cases", "5", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["search", dir.path().join("nope").to_str().unwrap(), "--query", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let out = indexed(dir.path());
    let o = run(&["search", out.to_str().unwrap(), "--query", "x", "--top-k", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["search", out.to_str().unwrap(), "--query", "x", "--delta-highlight", "1.5"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "provider = \"hash\"\nbogus = 1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "search", out.to_str().unwrap(), "--query", "x"]);
    assert_eq!(o.status.code(), Some(2));

    // a different embedder cannot open the index
    let cfg = dir.path().join("other.toml");
    fs::write(&cfg, "dimension = 32\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "search", out.to_str().unwrap(), "--query", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
