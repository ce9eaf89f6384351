//! Retrieval and explanation metrics, and a benchmark runner.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default similarity threshold for counting a line as aligned.
pub const DELTA_ALIGN: f64 = 0.5;

/// One query's ranking and its relevant ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl RankedList {
    /// 1-based rank of every relevant id found in the ranking.
    pub fn relevant_ranks(&self) -> Vec<usize> {
        self.ranking
            .iter()
            .enumerate()
            .filter(|(_, id)| self.relevant.contains(*id))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Reciprocal rank of the first relevant result, 0 if none is ranked.
    pub fn reciprocal_rank(&self) -> f64 {
        self.relevant_ranks().first().map_or(0.0, |&r| 1.0 / r as f64)
    }

    /// Best reciprocal rank over all relevant results, 0 if none is ranked.
    pub fn best_reciprocal_rank(&self) -> f64 {
        self.relevant_ranks()
            .iter()
            .map(|&r| 1.0 / r as f64)
            .fold(0.0, f64::max)
    }
}

fn mean_over(lists: &[RankedList], f: impl Fn(&RankedList) -> f64) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Domain("no ranked lists to evaluate".into()));
    }
    Ok(lists.iter().map(f).sum::<f64>() / lists.len() as f64)
}

/// Mean reciprocal rank of the first relevant result.
pub fn mrr(lists: &[RankedList]) -> Result<f64> {
    mean_over(lists, RankedList::reciprocal_rank)
}

/// Mean over queries of the best reciprocal rank among relevant results.
pub fn mmrr(lists: &[RankedList]) -> Result<f64> {
    mean_over(lists, RankedList::best_reciprocal_rank)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Items averaged over.
    pub evaluated: usize,
    /// Items skipped for having an empty gold set.
    pub skipped: usize,
}

/// Per-item set overlap, macro-averaged. Precision of an empty prediction
/// is 0.
fn macro_pr<'a>(items: impl Iterator<Item = (BTreeSet<usize>, &'a BTreeSet<usize>)>) -> PrecisionRecall {
    let mut out = PrecisionRecall::default();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for (predicted, gold) in items {
        if gold.is_empty() {
            out.skipped += 1;
            continue;
        }
        let hit = predicted.intersection(gold).count() as f64;
        if !predicted.is_empty() {
            p_sum += hit / predicted.len() as f64;
        }
        r_sum += hit / gold.len() as f64;
        out.evaluated += 1;
    }
    if out.evaluated > 0 {
        out.precision = p_sum / out.evaluated as f64;
        out.recall = r_sum / out.evaluated as f64;
    }
    out
}

/// Highlight scores of one text against its gold concept-bearing tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HighlightJudgment {
    pub scores: Vec<f64>,
    pub gold: BTreeSet<usize>,
}

impl HighlightJudgment {
    pub fn predicted(&self, delta_highlight: f64) -> BTreeSet<usize> {
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > delta_highlight)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One query concept's per-line similarities against its gold lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptAlignmentJudgment {
    /// `(line_index, similarity)` for every candidate line.
    pub line_similarities: Vec<(usize, f64)>,
    pub gold_lines: BTreeSet<usize>,
}

impl ConceptAlignmentJudgment {
    pub fn predicted(&self, delta_align: f64) -> BTreeSet<usize> {
        self.line_similarities
            .iter()
            .filter(|(_, s)| *s > delta_align)
            .map(|(l, _)| *l)
            .collect()
    }

    /// The `k` most similar lines; ties go to the lower line index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut lines = self.line_similarities.clone();
        lines.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        lines.into_iter().take(k).map(|(l, _)| l).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplanationJudgment {
    pub query: HighlightJudgment,
    pub code: HighlightJudgment,
    pub concepts: Vec<ConceptAlignmentJudgment>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HighlightPr {
    pub query: PrecisionRecall,
    pub code: PrecisionRecall,
}

/// Token highlight precision and recall per text kind, averaged over pairs.
pub fn highlight_pr(judgments: &[ExplanationJudgment], delta_highlight: f64) -> HighlightPr {
    HighlightPr {
        query: macro_pr(judgments.iter().map(|j| (j.query.predicted(delta_highlight), &j.query.gold))),
        code: macro_pr(judgments.iter().map(|j| (j.code.predicted(delta_highlight), &j.code.gold))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPr {
    #[serde(flatten)]
    pub pr: PrecisionRecall,
    /// Fraction of concepts whose top-k lines include a gold line.
    pub recall_at: BTreeMap<usize, f64>,
}

/// Alignment precision/recall at `delta_align`, averaged over concepts,
/// plus Recall@1/3/5.
pub fn alignment_pr(judgments: &[ExplanationJudgment], delta_align: f64) -> AlignmentPr {
    let concepts: Vec<&ConceptAlignmentJudgment> = judgments.iter().flat_map(|j| &j.concepts).collect();
    let pr = macro_pr(concepts.iter().map(|c| (c.predicted(delta_align), &c.gold_lines)));
    let scored: Vec<_> = concepts.iter().filter(|c| !c.gold_lines.is_empty()).collect();
    let recall_at = [1, 3, 5]
        .into_iter()
        .map(|k| {
            let hits = scored
                .iter()
                .filter(|c| c.top_k(k).iter().any(|l| c.gold_lines.contains(l)))
                .count();
            let value = if scored.is_empty() { 0.0 } else { hits as f64 / scored.len() as f64 };
            (k, value)
        })
        .collect();
    AlignmentPr { pr, recall_at }
}

/// One benchmark line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    pub query: String,
    pub relevant_ids: Vec<String>,
}

pub fn read_benchmark(reader: impl BufRead) -> Result<Vec<BenchmarkQuery>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mrr,
    Mmrr,
    All,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrr" => Ok(Metric::Mrr),
            "mmrr" => Ok(Metric::Mmrr),
            "all" => Ok(Metric::All),
            other => Err(Error::Config(format!("unknown metric `{other}` (mrr, mmrr, all)"))),
        }
    }
}

/// Anything that can rank the full corpus for a query.
pub trait Ranker: Sync {
    /// Every candidate id, best first.
    fn rank_all(&self, query: &str) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// 1-based ranks of the relevant ids.
    pub relevant_ranks: Vec<usize>,
    pub reciprocal_rank: f64,
    pub best_reciprocal_rank: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmrr: Option<f64>,
    pub per_query: Vec<QueryResult>,
    /// Queries skipped because a relevant id is not in the corpus, or the
    /// query could not be searched.
    pub skipped: usize,
    pub diagnostics: Vec<String>,
}

/// Runs every benchmark query through `ranker` and scores the rankings.
///
/// Queries run in parallel; the report keeps benchmark order.
pub fn run_benchmark(ranker: &dyn Ranker, queries: &[BenchmarkQuery], metric: Metric) -> Result<BenchmarkReport> {
    let ranked: Vec<std::result::Result<RankedList, String>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            if q.relevant_ids.is_empty() {
                return Err(format!("query {i}: no relevant ids"));
            }
            let ranking = ranker.rank_all(&q.query).map_err(|e| format!("query {i}: {e}"))?;
            let known: HashSet<&str> = ranking.iter().map(String::as_str).collect();
            if let Some(missing) = q.relevant_ids.iter().find(|id| !known.contains(id.as_str())) {
                return Err(format!("query {i}: relevant id `{missing}` not in index"));
            }
            Ok(RankedList {
                query_id: i.to_string(),
                ranking,
                relevant: q.relevant_ids.iter().cloned().collect(),
            })
        })
        .collect();

    let mut report = BenchmarkReport::default();
    let mut lists = Vec::new();
    for (q, r) in queries.iter().zip(ranked) {
        match r {
            Ok(list) => {
                report.per_query.push(QueryResult {
                    query: q.query.clone(),
                    relevant_ranks: list.relevant_ranks(),
                    reciprocal_rank: list.reciprocal_rank(),
                    best_reciprocal_rank: list.best_reciprocal_rank(),
                });
                lists.push(list);
            }
            Err(d) => {
                report.skipped += 1;
                report.diagnostics.push(d);
            }
        }
    }
    if lists.is_empty() {
        return Ok(report);
    }
    if matches!(metric, Metric::Mrr | Metric::All) {
        report.mrr = Some(mrr(&lists)?);
    }
    if matches!(metric, Metric::Mmrr | Metric::All) {
        report.mmrr = Some(mmrr(&lists)?);
    }
    Ok(report)
}
