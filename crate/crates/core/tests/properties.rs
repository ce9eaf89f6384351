use std::collections::{BTreeMap, BTreeSet};

use concept_search::annotate::{cohen_kappa, run_budgeted, ScriptedSource};
use concept_search::embed::{cosine, EmbedResponse, Embedding};
use concept_search::eval::{mmrr, mrr, ExplanationJudgment, HighlightJudgment, RankedList};
use concept_search::eval::{highlight_pr, ConceptAlignmentJudgment};
use concept_search::model::{tokenize, validate_concept_partition, AnnotatedPair, ConceptSpan, Language, TextKind, Token};
use concept_search::query::{cluster_concepts, HighlightScores};
use concept_search::train::{
    alignment_loss, focal_loss, hardness_score, select_hard_negatives, AlignmentBatch, ConceptExample, FocalParams,
    NegativeCandidate, Provenance, ScoredNegative, Selection,
};
use proptest::prelude::*;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn focal_falls_as_positive_probability_rises(
        p in 0.01..0.98f64, bump in 0.001..0.01f64, alpha in 0.05..0.95f64, gamma in 0.0..4.0f64
    ) {
        let params = FocalParams::new(alpha, gamma).unwrap();
        let lo = focal_loss(&[p], &[true], params).unwrap().loss;
        let hi = focal_loss(&[p + bump], &[true], params).unwrap().loss;
        prop_assert!(hi < lo);
        let lo_neg = focal_loss(&[p], &[false], params).unwrap().loss;
        let hi_neg = focal_loss(&[p + bump], &[false], params).unwrap().loss;
        prop_assert!(hi_neg > lo_neg);
    }

    #[test]
    fn alignment_loss_positive_and_finite(
        u in -1.0..1.0f64, v in prop::collection::vec(-1.0..1.0f64, 1..12), tau in 0.0015..2.0f64
    ) {
        // rows at prescribed cosines to e0, each in its own plane
        let d = v.len() + 2;
        let at = |c: f64, axis: usize| {
            let mut row = vec![0.0; d];
            row[0] = c;
            row[axis] = (1.0 - c * c).sqrt().max(1e-9);
            row
        };
        let mut table = vec![at(1.0, 1), at(u, 1)];
        table.extend(v.iter().enumerate().map(|(j, &c)| at(c, j + 2)));
        let batch = AlignmentBatch {
            table,
            concepts: vec![ConceptExample { query: 0, positive: 1, query_reference: vec![], candidates: vec![] }],
        };
        let selection = Selection {
            negatives: vec![(0..v.len()).map(|j| ScoredNegative { candidate: j, span: j + 2, score: 0.0 }).collect()],
            diagnostics: vec![],
        };
        let report = alignment_loss(&batch, &selection, tau).unwrap();
        prop_assert!(report.is_finite());
        prop_assert!(report.loss > 0.0);
    }

    #[test]
    fn selection_is_a_bounded_sorted_subset(
        seed_rows in prop::collection::vec(vector(4), 3..12),
        refs in prop::collection::vec(prop::option::of(vector(4)), 0..20),
        picks in prop::collection::vec(0usize..100, 20),
        k in 1usize..8,
    ) {
        let rows = seed_rows.len();
        let candidates: Vec<NegativeCandidate> = refs
            .iter()
            .zip(&picks)
            .map(|(r, &p)| NegativeCandidate {
                span: p % rows,
                provenance: Provenance::InterSample,
                description: r.as_ref().map(|_| "d".to_string()),
                description_reference: r.clone(),
            })
            .collect();
        let eligible: BTreeSet<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.span != 1 && c.description_reference.is_some())
            .map(|(i, _)| i)
            .collect();
        let batch = AlignmentBatch {
            table: seed_rows,
            concepts: vec![ConceptExample { query: 0, positive: 1, query_reference: vec![1.0, 0.0, 0.0, 0.0], candidates }],
        };
        let sel = select_hard_negatives(&batch, k).unwrap();
        let chosen = &sel.negatives[0];
        prop_assert_eq!(chosen.len(), k.min(eligible.len()));
        prop_assert!(chosen.iter().all(|n| eligible.contains(&n.candidate)));
        prop_assert!(chosen.windows(2).all(|w| w[0].score >= w[1].score));
        let distinct: BTreeSet<usize> = chosen.iter().map(|n| n.candidate).collect();
        prop_assert_eq!(distinct.len(), chosen.len());
        prop_assert_eq!(sel.diagnostics.len(), batch.concepts[0].candidates.len() - eligible.len());
    }

    #[test]
    fn hardness_ignores_vector_scale(
        q in vector(5), c in vector(5), gq in vector(5), gd in vector(5),
        s1 in 0.01..100.0f64, s2 in 0.01..100.0f64, s3 in 0.01..100.0f64,
    ) {
        let scale = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let a = hardness_score(&q, &c, &gq, &gd);
        let b = hardness_score(&scale(&q, s1), &scale(&c, s2), &scale(&gq, s3), &gd);
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((-2.0..=2.0).contains(&a));
    }

    #[test]
    fn kappa_is_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = cohen_kappa(&a, &b).unwrap();
        let ba = cohen_kappa(&b, &a).unwrap();
        prop_assert_eq!(ab.degenerate, ba.degenerate);
        prop_assert!((ab.value - ba.value).abs() < 1e-12);
        prop_assert!(ab.value <= 1.0 + 1e-12 && ab.value >= -1.0 - 1e-12);
    }

    #[test]
    fn retry_ledger_conserves_records(plan in prop::collection::vec((0usize..9, any::<bool>()), 0..40), budget in 0usize..6) {
        let good = r#"{"query":"sort list","code":"xs.sort()","language":"python","concepts":[{"id":"c","spans":["sort"],"token_indices":[0]}],"alignments":[{"concept_id":"c","units":[{"line_start":0,"line_end":0}]}]}"#;
        let mut source = ScriptedSource::default();
        let mut keys = Vec::new();
        for (i, &(failures, ends_well)) in plan.iter().enumerate() {
            let mut script = vec!["not json".to_string(); failures];
            if ends_well {
                script.push(good.to_string());
            }
            let key = format!("k{i}");
            source.scripts.insert(key.clone(), script);
            keys.push(key);
        }
        let run = run_budgeted(&keys, &mut source, budget);
        let l = &run.ledger;
        prop_assert_eq!(l.accepted.len() + l.discarded.len() + l.in_flight.len(), keys.len());
        prop_assert_eq!(l.retry_histogram.values().sum::<usize>(), l.accepted.len());
        prop_assert!(l.retry_histogram.keys().all(|&r| r <= budget));
        prop_assert_eq!(run.outcomes.len(), l.attempts.values().sum::<usize>());
        prop_assert!(l.attempts.values().all(|&a| a <= budget + 1));
    }

    #[test]
    fn mmrr_never_below_mrr(
        lists in prop::collection::vec(
            (1..30usize).prop_flat_map(|n| (Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), 1..4usize)),
            1..20,
        )
    ) {
        let lists: Vec<RankedList> = lists
            .into_iter()
            .enumerate()
            .map(|(i, (ranking, relevant))| RankedList {
                query_id: i.to_string(),
                ranking: ranking.iter().map(|r| r.to_string()).collect(),
                relevant: (0..relevant).map(|r| r.to_string()).collect(),
            })
            .collect();
        let (a, b) = (mrr(&lists).unwrap(), mmrr(&lists).unwrap());
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn precision_recall_ignore_judgment_order(
        raw in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 1..10), prop::collection::vec(any::<bool>(), 10)), 1..10),
        seed in any::<u64>(),
    ) {
        let judgments: Vec<ExplanationJudgment> = raw
            .into_iter()
            .map(|(scores, gold_mask)| {
                let gold = (0..scores.len()).filter(|&i| gold_mask[i]).collect();
                let h = HighlightJudgment { scores, gold };
                ExplanationJudgment {
                    query: h.clone(),
                    code: h,
                    concepts: Vec::<ConceptAlignmentJudgment>::new(),
                }
            })
            .collect();
        let mut shuffled = judgments.clone();
        shuffled.rotate_left((seed as usize) % judgments.len());
        let (a, b) = (highlight_pr(&judgments, 0.4), highlight_pr(&shuffled, 0.4));
        prop_assert!((a.query.precision - b.query.precision).abs() < 1e-12);
        prop_assert!((a.code.recall - b.code.recall).abs() < 1e-12);
        prop_assert_eq!(a.query.evaluated + a.query.skipped, judgments.len());
    }

    #[test]
    fn clusters_partition_the_highlighted_tokens(
        rows in prop::collection::vec((vector(4), 0.0..1.0f64), 1..10),
        delta in 0.05..1.0f64,
    ) {
        let tokens = (0..rows.len())
            .map(|i| Token { text: format!("t{i}"), start: 2 * i, end: 2 * i + 1, line_index: None })
            .collect();
        let resp = EmbedResponse {
            dimension: 4,
            tokens,
            embeddings: rows.iter().map(|(v, _)| Embedding(v.clone())).collect(),
        };
        let scores = HighlightScores { kind: TextKind::Query, scores: rows.iter().map(|r| r.1).collect() };
        let concepts = cluster_concepts(&resp, &scores, 0.4, delta).unwrap();
        let selected = scores.selected(0.4);
        let members: Vec<usize> = concepts.iter().flat_map(|c| c.members.clone()).collect();
        if selected.is_empty() {
            prop_assert_eq!(concepts.len(), 1);
            prop_assert!(concepts[0].fallback);
        } else {
            let mut sorted = members.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, selected);
            prop_assert!(concepts.windows(2).all(|w| w[0].members[0] < w[1].members[0]));
            // separate clusters end below the merge threshold
            for i in 0..concepts.len() {
                for j in i + 1..concepts.len() {
                    prop_assert!(cosine(&concepts[i].centroid.0, &concepts[j].centroid.0).value <= delta);
                }
            }
        }
    }

    #[test]
    fn token_offsets_slice_their_text(text in "[a-zA-Z0-9_ .(){}=+\\-\\n\\t]{0,80}", code in any::<bool>()) {
        let kind = if code { TextKind::Code } else { TextKind::Query };
        let tokens = tokenize(&text, kind);
        let chars: Vec<char> = text.chars().collect();
        let mut last_end = 0;
        for t in &tokens {
            prop_assert!(t.start < t.end && t.start >= last_end);
            let slice: String = chars[t.start..t.end].iter().collect();
            prop_assert_eq!(&slice, &t.text);
            prop_assert!(!slice.chars().any(char::is_whitespace));
            prop_assert_eq!(t.line_index.is_some(), code);
            last_end = t.end;
        }
        let rebuilt: String = tokens.iter().map(|t| t.text.as_str()).collect();
        let stripped: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        prop_assert_eq!(rebuilt, stripped);
    }

    #[test]
    fn partition_flags_every_shared_token(spans in prop::collection::vec(prop::collection::btree_set(0usize..6, 1..4), 1..4)) {
        let pair = AnnotatedPair {
            id: None,
            query: "a b c d e f".into(),
            code: "x".into(),
            language: Language::Python,
            concepts: spans
                .iter()
                .enumerate()
                .map(|(i, s)| ConceptSpan { id: format!("c{i}"), spans: vec![], token_indices: s.iter().copied().collect() })
                .collect(),
            alignments: vec![],
        };
        let mut owners: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &spans {
            for &t in s {
                *owners.entry(t).or_default() += 1;
            }
        }
        let shared = owners.values().filter(|&&n| n > 1).count();
        prop_assert_eq!(validate_concept_partition(&pair).violations.len(), shared);
    }
}
