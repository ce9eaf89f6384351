//! Reference implementations of the training objectives with analytic
//! gradients.
//!
//! - [`focal_loss`] / [`highlight_loss`]: per-token concept-bearing
//!   classification.
//! - [`hardness_score`] / [`select_hard_negatives`]: hard-negative mining
//!   against a frozen reference encoder.
//! - [`alignment_loss`]: InfoNCE over query-span/code-span cosines.
//! - [`total_loss`]: unweighted sum of the three.
//!
//! Gradients are reported as named blocks (see [`Gradients`]). Embedding
//! rows are keyed `emb.<row>` so losses evaluated over one shared table
//! accumulate into the same entries.

pub mod check;
mod contrastive;
mod focal;
mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use contrastive::{
    alignment_loss, hardness_score, select_hard_negatives, AlignmentBatch, ConceptExample, NegativeCandidate,
    Provenance, ScoredNegative, Selection, DEFAULT_NEGATIVES, DEFAULT_TEMPERATURE,
};
pub use focal::{focal_loss, highlight_loss, FocalParams};
pub use toy::{toy_fit, ToyConfig, ToyDataset, ToyFit};

/// Named gradient blocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.0.get(key).map(Vec::as_slice)
    }

    /// Adds `values` into block `key`, creating it if needed.
    pub fn accumulate(&mut self, key: impl Into<String>, values: &[f64]) {
        let entry = self.0.entry(key.into()).or_insert_with(|| vec![0.0; values.len()]);
        assert_eq!(entry.len(), values.len(), "gradient block length changed");
        for (e, v) in entry.iter_mut().zip(values) {
            *e += v;
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.0 {
            self.accumulate(k.clone(), v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().flatten().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.0.iter()
    }
}

pub fn embedding_key(row: usize) -> String {
    format!("emb.{row}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Summed loss.
    pub loss: f64,
    pub gradients: Gradients,
    /// Concepts that contributed (alignment loss only).
    pub concepts: usize,
    /// Concepts skipped for lack of negatives.
    pub skipped_concepts: usize,
    /// Total negatives used across concepts.
    pub negatives_used: usize,
    pub temperature: Option<f64>,
}

impl LossReport {
    /// Loss divided by the number of contributing concepts.
    pub fn per_concept_mean(&self) -> Option<f64> {
        (self.concepts > 0).then(|| self.loss / self.concepts as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.gradients.is_finite()
    }
}

/// Unweighted sum of the code highlight, query highlight and alignment
/// losses; gradients add block-wise.
pub fn total_loss(code_highlight: &LossReport, query_highlight: &LossReport, alignment: &LossReport) -> LossReport {
    let mut gradients = Gradients::default();
    for part in [code_highlight, query_highlight, alignment] {
        gradients.merge(&part.gradients);
    }
    LossReport {
        loss: code_highlight.loss + query_highlight.loss + alignment.loss,
        gradients,
        concepts: alignment.concepts,
        skipped_concepts: alignment.skipped_concepts,
        negatives_used: alignment.negatives_used,
        temperature: alignment.temperature,
    }
}
