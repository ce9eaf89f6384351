//! Finite-difference verification of the analytic gradients, plus the
//! closed-form loss identities. Backs the `loss-check` CLI subcommand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    alignment_loss, embedding_key, focal_loss, highlight_loss, total_loss, AlignmentBatch, ConceptExample,
    FocalParams, LossReport, ScoredNegative, Selection,
};
use crate::error::Result;
use crate::model::TextKind;
use crate::query::ProbeHead;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Named parameter blocks, laid out like [`super::Gradients`].
pub type Params = BTreeMap<String, Vec<f64>>;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = crate::embed::norm(analytic).max(crate::embed::norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences over every parameter. Blocks missing from the analytic
/// gradients count as zero.
pub fn gradient_error(params: &Params, f: impl Fn(&Params) -> Result<LossReport>) -> Result<f64> {
    let analytic_report = f(params)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = params.clone();
    for (key, values) in params {
        let grad = analytic_report.gradients.get(key);
        for i in 0..values.len() {
            analytic.push(grad.map_or(0.0, |g| g[i]));
            probe.get_mut(key).unwrap()[i] = values[i] + STEP;
            let plus = f(&probe)?.loss;
            probe.get_mut(key).unwrap()[i] = values[i] - STEP;
            let minus = f(&probe)?.loss;
            probe.get_mut(key).unwrap()[i] = values[i];
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    /// Largest relative gradient error (gradient rows) or largest deviation
    /// from the closed form (identity rows).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn row(name: &str, cases: usize, worst: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        name: name.into(),
        cases,
        worst,
        tolerance,
        passed: worst.is_finite() && worst <= tolerance,
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random probabilities kept away from 0 and 1 so `p ± h` stays in range.
fn probabilities(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.02..0.98)).collect()
}

/// Focal loss with respect to the probabilities, random α and γ.
pub fn focal_case(rng: &mut impl Rng) -> Result<f64> {
    let n = rng.random_range(1..12);
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let focal = FocalParams::new(rng.random_range(0.05..0.95), rng.random_range(0.0..4.0))?;
    let params = Params::from([("p".to_string(), probabilities(rng, n))]);
    gradient_error(&params, |p| focal_loss(&p["p"], &labels, focal))
}

/// Probe-head focal loss with respect to head weights, bias and embeddings.
pub fn highlight_case(rng: &mut impl Rng) -> Result<f64> {
    let dim = rng.random_range(2..9);
    let rows = rng.random_range(1..8);
    let table: Vec<Vec<f64>> = (0..rows).map(|_| normal_vec(rng, dim)).collect();
    let token_rows: Vec<usize> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..rows)).collect();
    let labels: Vec<bool> = token_rows.iter().map(|_| rng.random_bool(0.4)).collect();
    let focal = FocalParams::default();
    let mut params = table_params(&table);
    params.insert("code.weights".into(), normal_vec(rng, dim));
    params.insert("code.bias".into(), vec![rng.random_range(-1.0..1.0)]);
    gradient_error(&params, |p| {
        let head = ProbeHead::new(TextKind::Code, p["code.weights"].clone(), p["code.bias"][0]);
        highlight_loss(&head, "code", &unpack_table(p, rows), &token_rows, &labels, focal)
    })
}

/// A random alignment batch over one shared table with a random selection.
pub fn random_alignment(rng: &mut impl Rng, dim: usize) -> (AlignmentBatch, Selection) {
    let rows = rng.random_range(3..10);
    let table: Vec<Vec<f64>> = (0..rows).map(|_| normal_vec(rng, dim)).collect();
    let mut concepts = Vec::new();
    let mut negatives = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let query = rng.random_range(0..rows);
        let positive = rng.random_range(0..rows);
        let pool: Vec<usize> = (0..rows).filter(|&r| r != positive).collect();
        let k = rng.random_range(1..=pool.len());
        negatives.push(
            pool.iter()
                .take(k)
                .enumerate()
                .map(|(candidate, &span)| ScoredNegative {
                    candidate,
                    span,
                    score: 0.0,
                })
                .collect(),
        );
        concepts.push(ConceptExample {
            query,
            positive,
            query_reference: vec![],
            candidates: vec![],
        });
    }
    (
        AlignmentBatch { table, concepts },
        Selection {
            negatives,
            diagnostics: vec![],
        },
    )
}

/// InfoNCE with respect to every table row.
pub fn alignment_case(rng: &mut impl Rng) -> Result<f64> {
    let dim = rng.random_range(2..9);
    let (batch, selection) = random_alignment(rng, dim);
    let tau = rng.random_range(0.1..1.0);
    let rows = batch.table.len();
    gradient_error(&table_params(&batch.table), |p| {
        let b = AlignmentBatch {
            table: unpack_table(p, rows),
            concepts: batch.concepts.clone(),
        };
        alignment_loss(&b, &selection, tau)
    })
}

/// Summed losses over one shared table and both heads.
pub fn total_case(rng: &mut impl Rng) -> Result<f64> {
    let dim = rng.random_range(2..7);
    let (batch, selection) = random_alignment(rng, dim);
    let rows = batch.table.len();
    let q_rows: Vec<usize> = (0..rows).filter(|_| rng.random_bool(0.6)).collect();
    let c_rows: Vec<usize> = (0..rows).filter(|_| rng.random_bool(0.6)).collect();
    let q_labels: Vec<bool> = q_rows.iter().map(|_| rng.random_bool(0.5)).collect();
    let c_labels: Vec<bool> = c_rows.iter().map(|_| rng.random_bool(0.5)).collect();
    let mut params = table_params(&batch.table);
    for prefix in ["query", "code"] {
        params.insert(format!("{prefix}.weights"), normal_vec(rng, dim));
        params.insert(format!("{prefix}.bias"), vec![rng.random_range(-1.0..1.0)]);
    }
    let focal = FocalParams::default();
    gradient_error(&params, |p| {
        let table = unpack_table(p, rows);
        let head = |prefix: &str, kind| ProbeHead::new(kind, p[&format!("{prefix}.weights")].clone(), p[&format!("{prefix}.bias")][0]);
        let q = highlight_loss(&head("query", TextKind::Query), "query", &table, &q_rows, &q_labels, focal)?;
        let c = highlight_loss(&head("code", TextKind::Code), "code", &table, &c_rows, &c_labels, focal)?;
        let b = AlignmentBatch {
            table,
            concepts: batch.concepts.clone(),
        };
        let a = alignment_loss(&b, &selection, 0.1)?;
        Ok(total_loss(&c, &q, &a))
    })
}

fn table_params(table: &[Vec<f64>]) -> Params {
    table.iter().enumerate().map(|(i, r)| (embedding_key(i), r.clone())).collect()
}

fn unpack_table(p: &Params, rows: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| p[&embedding_key(i)].clone()).collect()
}

/// Largest `|focal(γ=0, α=0.5) − BCE/2|` over `cases` random inputs.
pub fn half_bce_deviation(rng: &mut impl Rng, cases: usize) -> Result<f64> {
    let params = FocalParams::new(0.5, 0.0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..32);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let bce: f64 = p.iter().zip(&y).map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() }).sum();
        worst = worst.max((focal_loss(&p, &y, params)?.loss - 0.5 * bce).abs());
    }
    Ok(worst)
}

/// Largest `|InfoNCE − ln(K+1)|` when the positive and all `k` negatives
/// share one cosine.
pub fn equal_similarity_deviation(rng: &mut impl Rng, k: usize, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dim = rng.random_range(2..8);
        let s: f64 = rng.random_range(-0.99..0.99);
        // query along e0; every other row has cosine s via a shared e1 tail
        let mut q = vec![0.0; dim];
        q[0] = rng.random_range(0.1..5.0);
        let mut table = vec![q];
        for _ in 0..=k {
            let mut v = vec![0.0; dim];
            let scale = rng.random_range(0.1..5.0);
            v[0] = s * scale;
            v[1] = (1.0 - s * s).sqrt() * scale;
            table.push(v);
        }
        let batch = AlignmentBatch {
            table,
            concepts: vec![ConceptExample {
                query: 0,
                positive: 1,
                query_reference: vec![],
                candidates: vec![],
            }],
        };
        let selection = Selection {
            negatives: vec![(0..k)
                .map(|i| ScoredNegative {
                    candidate: i,
                    span: i + 2,
                    score: 0.0,
                })
                .collect()],
            diagnostics: vec![],
        };
        let tau = rng.random_range(0.01..2.0);
        let loss = alignment_loss(&batch, &selection, tau)?.loss;
        worst = worst.max((loss - ((k + 1) as f64).ln()).abs());
    }
    Ok(worst)
}

/// Largest `|total − (code + query + alignment)|` over random component values.
pub fn total_sum_deviation(rng: &mut impl Rng, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let parts: Vec<LossReport> = (0..3)
            .map(|_| LossReport {
                loss: rng.random_range(0.0..10.0),
                ..Default::default()
            })
            .collect();
        let t = total_loss(&parts[0], &parts[1], &parts[2]);
        worst = worst.max((t.loss - (parts[0].loss + parts[1].loss + parts[2].loss)).abs());
    }
    worst
}

/// Runs every verification with `cases` seeded inputs per row.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    rows.push(row("focal = 0.5 x BCE (gamma 0)", cases, half_bce_deviation(&mut rng, cases)?, 1e-12));
    for k in [1, 3, 10] {
        rows.push(row(
            &format!("alignment = ln({}) at equal cosines", k + 1),
            cases,
            equal_similarity_deviation(&mut rng, k, cases)?,
            1e-9,
        ));
    }
    rows.push(row("total = sum of parts", cases, total_sum_deviation(&mut rng, cases), 0.0));
    type Case = fn(&mut ChaCha8Rng) -> Result<f64>;
    let gradient_cases: [(&str, Case); 4] = [
        ("focal gradient (p)", focal_case),
        ("highlight gradient (head, embeddings)", highlight_case),
        ("alignment gradient (embeddings)", alignment_case),
        ("total gradient (shared table, heads)", total_case),
    ];
    for (name, case) in gradient_cases {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            worst = worst.max(case(&mut rng)?);
        }
        rows.push(row(name, cases, worst, GRADIENT_TOLERANCE));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let params = Params::from([("x".to_string(), vec![1.5, -0.5])]);
        let err = gradient_error(&params, |p| {
            let x = &p["x"];
            let mut g = super::super::Gradients::default();
            g.accumulate("x", &[x[0], x[1]]); // true gradient is 2x
            Ok(LossReport {
                loss: x[0] * x[0] + x[1] * x[1],
                gradients: g,
                ..Default::default()
            })
        })
        .unwrap();
        assert!((err - 0.5).abs() < 1e-8);
    }

    #[test]
    fn a_few_cases_pass() {
        let rows = run_all(5, 3).unwrap();
        for r in &rows {
            assert!(r.passed, "{r:?}");
        }
    }
}
