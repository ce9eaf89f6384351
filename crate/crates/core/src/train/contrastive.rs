use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{embedding_key, Gradients, LossReport};
use crate::embed::{cosine, norm, span_embedding, EmbedRequest, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::AnnotatedPair;

pub const DEFAULT_NEGATIVES: usize = 50;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Another concept of the same query/code pair.
    IntraSample,
    /// A concept span from another pair in the batch.
    InterSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCandidate {
    /// Row of the candidate code span in the batch table.
    pub span: usize,
    pub provenance: Provenance,
    /// Description of the candidate code span, if the annotation had one.
    pub description: Option<String>,
    /// Reference-encoder embedding of `description`.
    pub description_reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExample {
    /// Row of the query-span embedding.
    pub query: usize,
    /// Row of the aligned (positive) code-span embedding.
    pub positive: usize,
    /// Reference-encoder embedding of the query span text.
    pub query_reference: Vec<f64>,
    pub candidates: Vec<NegativeCandidate>,
}

/// Span embeddings (one table shared by all concepts) plus, per concept,
/// its positive and its negative pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBatch {
    pub table: Vec<Vec<f64>>,
    pub concepts: Vec<ConceptExample>,
}

/// `cos(q, c) - cos(g(q_text), g(d))`: how much more similar the current
/// model finds a negative than the frozen reference encoder does.
pub fn hardness_score(query_span: &[f64], code_span: &[f64], query_reference: &[f64], description_reference: &[f64]) -> f64 {
    cosine(query_span, code_span).value - cosine(query_reference, description_reference).value
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNegative {
    /// Index into the concept's candidate list.
    pub candidate: usize,
    pub span: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Per concept, the chosen negatives, hardest first.
    pub negatives: Vec<Vec<ScoredNegative>>,
    pub diagnostics: Vec<String>,
}

/// Scores every negative candidate and keeps the `k` hardest per concept.
///
/// Sorting is stable, so equal scores keep their original candidate order.
/// Candidates without a description reference, or equal to the positive,
/// are excluded and reported in `diagnostics`.
pub fn select_hard_negatives(batch: &AlignmentBatch, k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::Domain("number of negatives must be at least 1".into()));
    }
    let mut selection = Selection::default();
    for (a, concept) in batch.concepts.iter().enumerate() {
        let query = row(&batch.table, concept.query)?;
        let mut scored = Vec::with_capacity(concept.candidates.len());
        for (i, cand) in concept.candidates.iter().enumerate() {
            if cand.span == concept.positive {
                selection
                    .diagnostics
                    .push(format!("concept {a}: candidate {i} is the positive span, excluded"));
                continue;
            }
            let Some(desc_ref) = &cand.description_reference else {
                selection
                    .diagnostics
                    .push(format!("concept {a}: candidate {i} has no description, excluded"));
                continue;
            };
            let score = hardness_score(query, row(&batch.table, cand.span)?, &concept.query_reference, desc_ref);
            scored.push(ScoredNegative {
                candidate: i,
                span: cand.span,
                score,
            });
        }
        scored.sort_by(|x, y| y.score.total_cmp(&x.score));
        scored.truncate(k);
        selection.negatives.push(scored);
    }
    Ok(selection)
}

fn row(table: &[Vec<f64>], i: usize) -> Result<&[f64]> {
    table.get(i).map(Vec::as_slice).ok_or(Error::Range {
        what: "span row",
        index: i,
        len: table.len(),
    })
}

/// Gradients of `cos(x, y)` with respect to `x` and `y`.
fn cosine_grads(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let c = cosine(x, y);
    if c.degenerate {
        return (0.0, vec![0.0; x.len()], vec![0.0; y.len()]);
    }
    // Unclamped value keeps the gradient consistent with the function.
    let (nx, ny) = (norm(x), norm(y));
    let value = crate::embed::dot(x, y) / (nx * ny);
    let gx = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| yi / (nx * ny) - value * xi / (nx * nx))
        .collect();
    let gy = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| xi / (nx * ny) - value * yi / (ny * ny))
        .collect();
    (value, gx, gy)
}

/// InfoNCE over the selected negatives, summed over concepts.
///
/// Per concept: `-ln(e^{u/τ} / (e^{u/τ} + Σ_b e^{v_b/τ}))` with
/// `u = cos(q, positive)` and `v_b = cos(q, negative_b)`, evaluated with a
/// max-shifted log-sum-exp. Concepts with no negatives are skipped and
/// counted. Gradients flow into every table row involved (`emb.<row>`).
pub fn alignment_loss(batch: &AlignmentBatch, selection: &Selection, temperature: f64) -> Result<LossReport> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    if selection.negatives.len() != batch.concepts.len() {
        return Err(Error::Contract(format!(
            "selection covers {} concepts, batch has {}",
            selection.negatives.len(),
            batch.concepts.len()
        )));
    }

    let mut report = LossReport {
        temperature: Some(temperature),
        ..Default::default()
    };
    let mut gradients = Gradients::default();

    for (concept, negatives) in batch.concepts.iter().zip(&selection.negatives) {
        if negatives.is_empty() {
            report.skipped_concepts += 1;
            continue;
        }
        let q = row(&batch.table, concept.query)?;
        let mut sims = Vec::with_capacity(negatives.len() + 1);
        let mut grads = Vec::with_capacity(negatives.len() + 1);
        let mut rows = Vec::with_capacity(negatives.len() + 1);
        for r in std::iter::once(concept.positive).chain(negatives.iter().map(|n| n.span)) {
            let (s, gq, gc) = cosine_grads(q, row(&batch.table, r)?);
            sims.push(s);
            grads.push((gq, gc));
            rows.push(r);
        }

        let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
        let top = (0..logits.len()).fold(0, |m, j| if logits[j] > logits[m] { j } else { m });
        let max = logits[top];
        // ln Σ e^{l - max} = ln(1 + rest), kept accurate when rest is tiny
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, l)| (l - max).exp())
            .sum();
        let lse = max + rest.ln_1p();
        report.loss += (max - logits[0]) + rest.ln_1p();

        // d/d logit_j = softmax_j - [j == 0]
        for (j, ((gq, gc), &r)) in grads.iter().zip(&rows).enumerate() {
            let soft = (logits[j] - lse).exp();
            let dlogit = soft - if j == 0 { 1.0 } else { 0.0 };
            let ds = dlogit / temperature;
            let dq: Vec<f64> = gq.iter().map(|g| ds * g).collect();
            let dc: Vec<f64> = gc.iter().map(|g| ds * g).collect();
            gradients.accumulate(embedding_key(concept.query), &dq);
            gradients.accumulate(embedding_key(r), &dc);
        }
        report.concepts += 1;
        report.negatives_used += negatives.len();
    }
    report.gradients = gradients;
    Ok(report)
}

impl AlignmentBatch {
    /// Builds a batch from annotated pairs.
    ///
    /// Query spans pool the concept's `token_indices`; code spans pool every
    /// token on the aligned lines. Each concept's negatives are the other
    /// concepts' code spans: from the same pair (intra-sample) and from the
    /// other pairs (inter-sample). Descriptions are the aligned units'
    /// descriptions joined by spaces; a span with only empty descriptions
    /// gets no description reference. Concepts without aligned lines are
    /// left out.
    pub fn from_pairs(pairs: &[AnnotatedPair], provider: &dyn EmbeddingProvider) -> Result<AlignmentBatch> {
        struct Span {
            pair: usize,
            query_row: usize,
            code_row: usize,
            query_reference: Vec<f64>,
            description: Option<String>,
        }

        let mut table: Vec<Vec<f64>> = Vec::new();
        let mut spans: Vec<Span> = Vec::new();
        let mut reference_cache: HashMap<String, Vec<f64>> = HashMap::new();
        let mut reference = |text: &str| -> Result<Vec<f64>> {
            if let Some(v) = reference_cache.get(text) {
                return Ok(v.clone());
            }
            let v = provider.embed_reference(text)?.into_inner();
            reference_cache.insert(text.to_string(), v.clone());
            Ok(v)
        };

        for (p, pair) in pairs.iter().enumerate() {
            let query = provider.embed(&EmbedRequest::query(pair.query.clone()))?;
            let code = provider.embed(&EmbedRequest::code(pair.code.clone(), None))?;
            for concept in &pair.concepts {
                let lines = pair.aligned_lines(&concept.id);
                let code_tokens: Vec<usize> = code
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.line_index.is_some_and(|l| lines.binary_search(&l).is_ok()))
                    .map(|(i, _)| i)
                    .collect();
                if code_tokens.is_empty() || concept.token_indices.is_empty() {
                    continue;
                }
                let query_vec = span_embedding(&query.embeddings, &concept.token_indices)?;
                let code_vec = span_embedding(&code.embeddings, &code_tokens)?;
                let query_text = concept_text(&query.tokens, &concept.token_indices, &pair.query);
                let descriptions: Vec<&str> = pair
                    .units_for(&concept.id)
                    .map(|u| u.description.trim())
                    .filter(|d| !d.is_empty())
                    .collect();
                table.push(query_vec.into_inner());
                table.push(code_vec.into_inner());
                spans.push(Span {
                    pair: p,
                    query_row: table.len() - 2,
                    code_row: table.len() - 1,
                    query_reference: reference(&query_text)?,
                    description: (!descriptions.is_empty()).then(|| descriptions.join(" ")),
                });
            }
        }

        let mut concepts = Vec::with_capacity(spans.len());
        for (a, span) in spans.iter().enumerate() {
            let mut candidates = Vec::new();
            for (b, other) in spans.iter().enumerate() {
                if a == b {
                    continue;
                }
                candidates.push(NegativeCandidate {
                    span: other.code_row,
                    provenance: if other.pair == span.pair {
                        Provenance::IntraSample
                    } else {
                        Provenance::InterSample
                    },
                    description_reference: other.description.as_deref().map(&mut reference).transpose()?,
                    description: other.description.clone(),
                });
            }
            concepts.push(ConceptExample {
                query: span.query_row,
                positive: span.code_row,
                query_reference: span.query_reference.clone(),
                candidates,
            });
        }
        Ok(AlignmentBatch { table, concepts })
    }

    pub fn dimension(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    pub fn embedding(&self, row: usize) -> Embedding {
        Embedding(self.table[row].clone())
    }
}

/// Query text covered by a concept's tokens, joined by single spaces where
/// the tokens are not adjacent.
fn concept_text(tokens: &[crate::model::Token], indices: &[usize], query: &str) -> String {
    let mut out = String::new();
    let mut prev_end = None;
    for &i in indices {
        let Some(t) = tokens.get(i) else { continue };
        if let Some(end) = prev_end {
            if t.start != end {
                out.push(' ');
            }
        }
        out.push_str(&t.text);
        prev_end = Some(t.end);
    }
    if out.trim().is_empty() {
        query.to_string()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::model::{Alignment, CodeUnit, ConceptSpan, Language};

    fn batch_with_sims(u: f64, vs: &[f64]) -> (AlignmentBatch, Selection) {
        // Query along e0; each other row is a unit vector at the requested cosine.
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let mut table = vec![vec![1.0, 0.0], at(u)];
        table.extend(vs.iter().map(|&v| at(v)));
        let negatives = (0..vs.len())
            .map(|i| ScoredNegative {
                candidate: i,
                span: i + 2,
                score: 0.0,
            })
            .collect();
        (
            AlignmentBatch {
                table,
                concepts: vec![ConceptExample {
                    query: 0,
                    positive: 1,
                    query_reference: vec![1.0, 0.0],
                    candidates: vec![],
                }],
            },
            Selection {
                negatives: vec![negatives],
                diagnostics: vec![],
            },
        )
    }

    #[test]
    fn equal_similarities_give_log_k_plus_one() {
        for (s, tau) in [(0.3, 0.1), (-0.5, 1.0), (0.99, 0.05)] {
            let (batch, sel) = batch_with_sims(s, &[s, s, s]);
            let r = alignment_loss(&batch, &sel, tau).unwrap();
            assert!((r.loss - 4f64.ln()).abs() < 1e-9, "s={s} tau={tau}: {}", r.loss);
        }
        assert!((4f64.ln() - 1.3862944).abs() < 1e-7);
    }

    #[test]
    fn well_separated_pair() {
        let (batch, sel) = batch_with_sims(1.0, &[-1.0]);
        let r = alignment_loss(&batch, &sel, 0.1).unwrap();
        // -ln(e^10 / (e^10 + e^-10)) = ln(1 + e^-20)
        let want = (-20f64).exp().ln_1p();
        assert!((r.loss - want).abs() < 1e-12 * want);
        assert!((r.loss - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature() {
        let (batch, sel) = batch_with_sims(0.5, &[0.1]);
        assert!(matches!(alignment_loss(&batch, &sel, 0.0), Err(Error::Domain(_))));
        assert!(matches!(alignment_loss(&batch, &sel, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn concepts_without_negatives_are_skipped() {
        let (batch, _) = batch_with_sims(0.5, &[]);
        let sel = Selection {
            negatives: vec![vec![]],
            diagnostics: vec![],
        };
        let r = alignment_loss(&batch, &sel, 0.1).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.skipped_concepts, 1);
        assert_eq!(r.per_concept_mean(), None);
    }

    #[test]
    fn hardness_cases() {
        let e0 = [1.0, 0.0];
        let e1 = [0.0, 1.0];
        assert_eq!(hardness_score(&e0, &e0, &e1, &e1), 0.0);
        // current-model cosine 0.9, reference cosine 0.1
        let c = [0.9, (1.0f64 - 0.81).sqrt()];
        let d = [0.1, (1.0f64 - 0.01).sqrt()];
        assert!((hardness_score(&e0, &c, &e0, &d) - 0.8).abs() < 1e-12);
        let scaled = [2.7, 3.0 * (1.0f64 - 0.81).sqrt()];
        assert!((hardness_score(&[5.0, 0.0], &scaled, &e0, &[0.3, 3.0 * (0.99f64).sqrt()]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn small_pool_takes_everything() {
        let mut batch = AlignmentBatch {
            table: vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.1, 0.9], vec![-1.0, 0.2]],
            concepts: vec![],
        };
        batch.concepts.push(ConceptExample {
            query: 0,
            positive: 1,
            query_reference: vec![1.0, 0.0],
            candidates: (2..5)
                .map(|span| NegativeCandidate {
                    span,
                    provenance: Provenance::InterSample,
                    description: Some("d".into()),
                    description_reference: Some(vec![0.0, 1.0]),
                })
                .collect(),
        });
        let sel = select_hard_negatives(&batch, DEFAULT_NEGATIVES).unwrap();
        assert_eq!(sel.negatives[0].iter().map(|n| n.span).collect::<Vec<_>>(), [2, 3, 4]);

        batch.concepts[0].candidates[1].description_reference = None;
        let sel = select_hard_negatives(&batch, 1).unwrap();
        assert_eq!(sel.negatives[0].len(), 1);
        assert_eq!(sel.diagnostics.len(), 1);
        assert!(select_hard_negatives(&batch, 0).is_err());
    }

    #[test]
    fn batch_from_annotations() {
        let unit = |l: usize, d: &str| CodeUnit {
            line_start: l,
            line_end: l,
            description: d.into(),
            text: None,
        };
        let pair = |q: &str, code: &str| AnnotatedPair {
            id: None,
            query: q.into(),
            code: code.into(),
            language: Language::Python,
            concepts: vec![
                ConceptSpan {
                    id: "a".into(),
                    spans: vec![],
                    token_indices: vec![0],
                },
                ConceptSpan {
                    id: "b".into(),
                    spans: vec![],
                    token_indices: vec![1, 2],
                },
            ],
            alignments: vec![
                Alignment {
                    concept_id: "a".into(),
                    units: vec![unit(0, "opens the file")],
                },
                Alignment {
                    concept_id: "b".into(),
                    units: vec![unit(1, "")],
                },
            ],
        };
        let pairs = [
            pair("read json file", "f = open(p)\nreturn json.load(f)"),
            pair("sort list items", "xs.sort()\nreturn xs"),
        ];
        let batch = AlignmentBatch::from_pairs(&pairs, &HashEmbedder::default()).unwrap();
        assert_eq!(batch.concepts.len(), 4);
        assert_eq!(batch.table.len(), 8);
        let c0 = &batch.concepts[0];
        assert_eq!(c0.candidates.len(), 3);
        assert_eq!(c0.candidates[0].provenance, Provenance::IntraSample);
        assert_eq!(c0.candidates[1].provenance, Provenance::InterSample);
        // concept "b" has an empty description, so it cannot be scored
        assert!(c0.candidates[0].description_reference.is_none());
        let sel = select_hard_negatives(&batch, 50).unwrap();
        // only pair 1's concept "a" has a description
        assert_eq!(sel.negatives[0].len(), 1);
        assert_eq!(sel.diagnostics.len(), 6);
        assert!(sel.negatives.iter().flatten().all(|n| n.span % 2 == 1));
    }
}
