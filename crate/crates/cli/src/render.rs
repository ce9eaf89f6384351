//! Plain-text renderings for terminal output.

use std::fmt::Write;

use concept_search::annotate::{Status, ValidationReport};
use concept_search::eval::BenchmarkReport;
use concept_search::index::SearchResponse;
use concept_search::model::char_slice;
use concept_search::train::check::CheckRow;

pub fn search(query: &str, resp: &SearchResponse) -> String {
    let mut out = String::new();
    for c in &resp.concepts {
        let words: Vec<&str> = c.token_spans.iter().map(|[s, e]| char_slice(query, *s, *e)).collect();
        let flag = if c.fallback { " (fallback: no token passed the threshold)" } else { "" };
        writeln!(out, "concept {}: {}{flag}", c.id, words.join(" ")).unwrap();
    }
    for d in &resp.diagnostics {
        writeln!(out, "note: {d}").unwrap();
    }
    for (rank, hit) in resp.results.iter().enumerate() {
        writeln!(out).unwrap();
        if hit.degenerate {
            writeln!(out, "#{} {}  score {:.4}  (no aligned lines)", rank + 1, hit.id, hit.score).unwrap();
            continue;
        }
        writeln!(out, "#{} {}  score {:.4}", rank + 1, hit.id, hit.score).unwrap();
        let lines: Vec<&str> = hit.source.lines().collect();
        for m in &hit.matches {
            let text = lines.get(m.line).map_or("", |l| l.trim());
            writeln!(out, "  concept {} -> line {} ({:.4}): {text}", m.concept, m.line + 1, m.similarity).unwrap();
        }
    }
    out
}

pub fn benchmark(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    writeln!(out, "{:<8} {:>8}", "metric", "value").unwrap();
    if let Some(v) = report.mrr {
        writeln!(out, "{:<8} {:>8.4}", "MRR", v).unwrap();
    }
    if let Some(v) = report.mmrr {
        writeln!(out, "{:<8} {:>8.4}", "MMRR", v).unwrap();
    }
    writeln!(out, "queries  {:>8}", report.per_query.len()).unwrap();
    writeln!(out, "skipped  {:>8}", report.skipped).unwrap();
    for d in &report.diagnostics {
        writeln!(out, "note: {d}").unwrap();
    }
    out
}

pub fn checks(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>6}  {:>11}  {:>9}  result", "check", "cases", "worst", "tolerance").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>6}  {:>11.3e}  {:>9.0e}  {}",
            r.name,
            r.cases,
            r.worst,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

pub fn validation(report: &ValidationReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{} records: {} pass, {} format_fail, {} consistency_fail",
        report.total,
        report.count(Status::Pass),
        report.count(Status::FormatFail),
        report.count(Status::ConsistencyFail)
    )
    .unwrap();
    for (n, o) in report.outcomes.iter().enumerate() {
        if o.status == Status::Pass {
            continue;
        }
        let id = o.record_id.clone().unwrap_or_else(|| format!("record {}", n + 1));
        for v in &o.violations {
            writeln!(out, "{id}: {:?}: {}", v.assertion, v.detail).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use concept_search::index::{ConceptView, MatchView, SearchHit};

    #[test]
    fn search_names_concept_words_and_lines() {
        let resp = SearchResponse {
            concepts: vec![ConceptView {
                id: 0,
                token_spans: vec![[0, 4], [5, 9]],
                fallback: false,
            }],
            results: vec![
                SearchHit {
                    id: "a.py".into(),
                    score: 0.75,
                    degenerate: false,
                    matches: vec![MatchView {
                        concept: 0,
                        line: 1,
                        similarity: 0.75,
                    }],
                    source: "def f():\n    return sort(xs)\n".into(),
                },
                SearchHit {
                    id: "b.py".into(),
                    score: -1.0,
                    degenerate: true,
                    matches: vec![],
                    source: "pass".into(),
                },
            ],
            diagnostics: vec![],
            stats: Default::default(),
        };
        let text = search("sort list fast", &resp);
        assert!(text.contains("concept 0: sort list\n"));
        assert!(text.contains("line 2 (0.7500): return sort(xs)"));
        assert!(text.contains("#2 b.py  score -1.0000  (no aligned lines)"));
    }

    #[test]
    fn checks_flags_failures() {
        let rows = vec![
            CheckRow {
                name: "a".into(),
                cases: 3,
                worst: 1e-9,
                tolerance: 1e-4,
                passed: true,
            },
            CheckRow {
                name: "bb".into(),
                cases: 3,
                worst: 1.0,
                tolerance: 1e-4,
                passed: false,
            },
        ];
        let text = checks(&rows);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with("FAIL"));
    }
}
