//! Concept-to-line matching and candidate ranking.
//!
//! Each concept independently picks the concept-bearing line with the
//! highest cosine to its centroid (a line may serve several concepts); the
//! candidate's score is the mean of those per-concept maxima.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::LineEmbedding;
use crate::embed::cosine;
use crate::error::{Error, Result};
use crate::query::QueryConcept;

/// Score given to candidates without any concept-bearing line.
pub const DEGENERATE_SCORE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatch {
    /// Index into the query's concept list.
    pub concept: usize,
    pub line: usize,
    pub similarity: f64,
    /// The cosine involved a zero-norm vector.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedResult {
    pub id: String,
    pub score: f64,
    /// One per concept, in concept order; empty when degenerate.
    pub matches: Vec<ConceptMatch>,
    /// No concept-bearing line existed.
    pub degenerate: bool,
}

/// A matchable line: index plus embedding.
#[derive(Debug, Clone, Copy)]
pub struct LineView<'a> {
    pub line_index: usize,
    pub vector: &'a [f64],
}

impl<'a> From<&'a LineEmbedding> for LineView<'a> {
    fn from(l: &'a LineEmbedding) -> Self {
        LineView {
            line_index: l.line_index,
            vector: &l.vector,
        }
    }
}

/// Work counters for one matching run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    pub candidates: usize,
    /// Cosine evaluations (one dot product each against the centroid).
    pub cosine_evaluations: usize,
}

impl std::ops::AddAssign for MatchStats {
    fn add_assign(&mut self, rhs: Self) {
        self.candidates += rhs.candidates;
        self.cosine_evaluations += rhs.cosine_evaluations;
    }
}

/// Matches every concept against the concept-bearing lines of one candidate.
pub fn match_candidate(id: &str, concepts: &[QueryConcept], lines: &[LineEmbedding]) -> Result<ExplainedResult> {
    let views: Vec<LineView<'_>> = lines.iter().filter(|l| l.concept_bearing).map(LineView::from).collect();
    Ok(match_lines(id, concepts, &views)?.0)
}

/// Matches against lines already filtered to the concept-bearing ones.
///
/// Ties in similarity go to the lower line index.
pub fn match_lines(id: &str, concepts: &[QueryConcept], lines: &[LineView<'_>]) -> Result<(ExplainedResult, MatchStats)> {
    if concepts.is_empty() {
        return Err(Error::Contract("matching needs at least one query concept".into()));
    }
    let mut stats = MatchStats {
        candidates: 1,
        cosine_evaluations: 0,
    };
    if lines.is_empty() {
        return Ok((
            ExplainedResult {
                id: id.to_string(),
                score: DEGENERATE_SCORE,
                matches: Vec::new(),
                degenerate: true,
            },
            stats,
        ));
    }

    let mut matches = Vec::with_capacity(concepts.len());
    for (k, concept) in concepts.iter().enumerate() {
        let mut best: Option<ConceptMatch> = None;
        for line in lines {
            let c = cosine(&concept.centroid, line.vector);
            stats.cosine_evaluations += 1;
            let better = match &best {
                None => true,
                Some(b) => c.value > b.similarity || (c.value == b.similarity && line.line_index < b.line),
            };
            if better {
                best = Some(ConceptMatch {
                    concept: k,
                    line: line.line_index,
                    similarity: c.value,
                    degenerate_input: c.degenerate,
                });
            }
        }
        matches.push(best.expect("lines is non-empty"));
    }
    let score = matches.iter().map(|m| m.similarity).sum::<f64>() / concepts.len() as f64;
    Ok((
        ExplainedResult {
            id: id.to_string(),
            score,
            matches,
            degenerate: false,
        },
        stats,
    ))
}

/// Orders results by descending score, then ascending id.
pub fn result_order(a: &ExplainedResult, b: &ExplainedResult) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// A candidate handed to [`rank`]: its id and concept-bearing lines.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub lines: Vec<LineView<'a>>,
}

/// Scores all candidates (in parallel) and sorts them.
///
/// The order is independent of input order and scheduling.
pub fn rank(concepts: &[QueryConcept], candidates: &[Candidate<'_>]) -> Result<(Vec<ExplainedResult>, MatchStats)> {
    if concepts.is_empty() {
        return Err(Error::Contract("matching needs at least one query concept".into()));
    }
    let scored: Vec<(ExplainedResult, MatchStats)> = candidates
        .par_iter()
        .map(|c| match_lines(c.id, concepts, &c.lines))
        .collect::<Result<_>>()?;
    let mut stats = MatchStats::default();
    let mut results = Vec::with_capacity(scored.len());
    for (r, s) in scored {
        stats += s;
        results.push(r);
    }
    results.sort_by(result_order);
    Ok((results, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Embedding;

    fn concept(v: Vec<f64>) -> QueryConcept {
        QueryConcept {
            members: vec![0],
            centroid: Embedding(v),
            fallback: false,
        }
    }

    /// Unit vector at the given cosine to e0.
    fn at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    fn line(i: usize, v: Vec<f64>, bearing: bool) -> LineEmbedding {
        LineEmbedding {
            line_index: i,
            vector: Embedding(v),
            concept_bearing: bearing,
            max_highlight: if bearing { 0.9 } else { 0.1 },
        }
    }

    #[test]
    fn single_concept_argmax() {
        let lines = vec![line(0, at_cos(0.2), true), line(1, at_cos(0.9), true), line(2, at_cos(0.5), true)];
        let r = match_candidate("c", &[concept(vec![1.0, 0.0])], &lines).unwrap();
        assert_eq!(r.matches[0].line, 1);
        assert!((r.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn score_is_mean_of_maxima() {
        // concept 0 is e0, concept 1 is e1; line 0 has cos 0.8 with e0,
        // line 1 has cos 0.6 with e1 and less with e0.
        let l0 = vec![0.8, 0.0, 0.6];
        let l1 = vec![0.0, 0.6, 0.8];
        let lines = vec![line(0, l0, true), line(1, l1, true)];
        let concepts = [concept(vec![1.0, 0.0, 0.0]), concept(vec![0.0, 1.0, 0.0])];
        let r = match_candidate("c", &concepts, &lines).unwrap();
        assert!((r.score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn lines_can_be_reused() {
        let lines = vec![line(0, vec![1.0, 1.0], true), line(1, vec![-1.0, 0.0], true)];
        let concepts = [concept(vec![1.0, 0.0]), concept(vec![0.0, 1.0])];
        let r = match_candidate("c", &concepts, &lines).unwrap();
        assert_eq!(r.matches[0].line, 0);
        assert_eq!(r.matches[1].line, 0);
    }

    #[test]
    fn non_bearing_lines_are_ignored() {
        let lines = vec![line(0, vec![1.0, 0.0], false), line(1, vec![0.0, 1.0], true)];
        let r = match_candidate("c", &[concept(vec![1.0, 0.0])], &lines).unwrap();
        assert_eq!(r.matches[0].line, 1);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn no_bearing_lines_is_degenerate() {
        let lines = vec![line(0, vec![1.0, 0.0], false)];
        let r = match_candidate("c", &[concept(vec![1.0, 0.0])], &lines).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.score, -1.0);
        assert!(r.matches.is_empty());
    }

    #[test]
    fn empty_concepts_is_contract_error() {
        assert!(matches!(match_candidate("c", &[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_go_to_lower_line_and_lower_id() {
        let a = [LineView {
            line_index: 4,
            vector: &[1.0, 0.0],
        }];
        let b = [
            LineView {
                line_index: 3,
                vector: &[2.0, 0.0],
            },
            LineView {
                line_index: 1,
                vector: &[1.0, 0.0],
            },
        ];
        let concepts = [concept(vec![1.0, 0.0])];
        let (r, _) = match_lines("x", &concepts, &b).unwrap();
        assert_eq!(r.matches[0].line, 1);

        let cands = [
            Candidate { id: "b", lines: b.to_vec() },
            Candidate { id: "a", lines: a.to_vec() },
        ];
        let (ranked, stats) = rank(&concepts, &cands).unwrap();
        assert_eq!(ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(stats.cosine_evaluations, 3);
        assert_eq!(stats.candidates, 2);
    }
}
