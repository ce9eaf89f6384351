use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    alignment_loss, embedding_key, highlight_loss, select_hard_negatives, total_loss, AlignmentBatch, ConceptExample,
    FocalParams, Gradients, NegativeCandidate, Provenance, Selection,
};
use crate::embed::{cosine, EmbeddingProvider, HashEmbedder};
use crate::error::{Error, Result};
use crate::model::TextKind;
use crate::query::ProbeHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub concepts: usize,
    pub dimension: usize,
    /// Non-concept rows, labelled 0 for both heads.
    pub distractors: usize,
    pub negatives: usize,
    pub temperature: f64,
    pub focal: FocalParams,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            concepts: 16,
            dimension: 32,
            distractors: 16,
            negatives: super::DEFAULT_NEGATIVES,
            temperature: super::DEFAULT_TEMPERATURE,
            focal: FocalParams::default(),
            seed: 7,
        }
    }
}

/// Free embedding rows for a handful of synthetic concepts.
///
/// Row layout: concept `a` owns query row `2a` and code row `2a + 1`;
/// distractor rows follow. Every concept's negative pool is the code rows
/// of all other concepts (inter-sample), each with a synthetic description
/// embedded by a frozen [`HashEmbedder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub table: Vec<Vec<f64>>,
    pub query_head: ProbeHead,
    pub code_head: ProbeHead,
    /// Reference vector of each concept's query text.
    pub query_references: Vec<Vec<f64>>,
    /// Reference vector of each concept's code description.
    pub description_references: Vec<Vec<f64>>,
}

impl ToyDataset {
    pub fn generate(config: &ToyConfig) -> Result<ToyDataset> {
        if config.concepts < 2 || config.concepts > 64 {
            return Err(Error::Domain(format!("toy fit needs 2..=64 concepts, got {}", config.concepts)));
        }
        if config.dimension == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rows = 2 * config.concepts + config.distractors;
        let table = (0..rows)
            .map(|_| {
                let v: Vec<f64> = (0..config.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = crate::embed::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let reference = HashEmbedder::new(config.dimension, config.seed);
        let mut query_references = Vec::new();
        let mut description_references = Vec::new();
        for a in 0..config.concepts {
            query_references.push(reference.embed_reference(&format!("concept{a} request"))?.into_inner());
            description_references.push(reference.embed_reference(&format!("concept{a} implementation"))?.into_inner());
        }
        Ok(ToyDataset {
            config: config.clone(),
            table,
            query_head: ProbeHead::zeros(TextKind::Query, config.dimension),
            code_head: ProbeHead::zeros(TextKind::Code, config.dimension),
            query_references,
            description_references,
        })
    }

    fn batch(&self, table: Vec<Vec<f64>>) -> AlignmentBatch {
        let n = self.config.concepts;
        let concepts = (0..n)
            .map(|a| ConceptExample {
                query: 2 * a,
                positive: 2 * a + 1,
                query_reference: self.query_references[a].clone(),
                candidates: (0..n)
                    .filter(|&b| b != a)
                    .map(|b| NegativeCandidate {
                        span: 2 * b + 1,
                        provenance: Provenance::InterSample,
                        description: Some(format!("concept{b} implementation")),
                        description_reference: Some(self.description_references[b].clone()),
                    })
                    .collect(),
            })
            .collect();
        AlignmentBatch { table, concepts }
    }

    /// Rows and labels seen by the query head and the code head.
    fn highlight_rows(&self) -> ((Vec<usize>, Vec<bool>), (Vec<usize>, Vec<bool>)) {
        let n = self.config.concepts;
        let distractors: Vec<usize> = (2 * n..2 * n + self.config.distractors).collect();
        let side = |offset: usize| {
            let mut rows: Vec<usize> = (0..n).map(|a| 2 * a + offset).collect();
            let mut labels = vec![true; n];
            rows.extend(&distractors);
            labels.extend(std::iter::repeat_n(false, distractors.len()));
            (rows, labels)
        };
        (side(0), side(1))
    }
}

/// Outcome of [`toy_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFit {
    pub table: Vec<Vec<f64>>,
    pub query_head: ProbeHead,
    pub code_head: ProbeHead,
    /// Total loss before each step.
    pub losses: Vec<f64>,
    /// Negatives selected by the final table.
    pub selection: Selection,
    /// Per concept: positive cosine minus the largest selected-negative cosine.
    pub margins: Vec<f64>,
}

impl ToyFit {
    /// Every positive cosine is strictly above every selected negative's.
    pub fn separated(&self) -> bool {
        self.margins.iter().all(|&m| m > 0.0)
    }
}

/// Plain gradient descent on the summed highlight and alignment losses.
///
/// Negatives are reselected every step from the current table. Fully
/// deterministic: same dataset, steps and rate give bit-identical output.
pub fn toy_fit(dataset: &ToyDataset, steps: usize, learning_rate: f64) -> Result<ToyFit> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Domain(format!("learning rate {learning_rate} must be positive")));
    }
    let cfg = &dataset.config;
    let mut batch = dataset.batch(dataset.table.clone());
    let mut query_head = dataset.query_head.clone();
    let mut code_head = dataset.code_head.clone();
    let ((q_rows, q_labels), (c_rows, c_labels)) = dataset.highlight_rows();
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let selection = select_hard_negatives(&batch, cfg.negatives)?;
        let align = alignment_loss(&batch, &selection, cfg.temperature)?;
        let query = highlight_loss(&query_head, "query", &batch.table, &q_rows, &q_labels, cfg.focal)?;
        let code = highlight_loss(&code_head, "code", &batch.table, &c_rows, &c_labels, cfg.focal)?;
        let total = total_loss(&code, &query, &align);
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(total.loss);
        apply(&mut batch.table, &mut query_head, &mut code_head, &total.gradients, learning_rate);
    }

    let selection = select_hard_negatives(&batch, cfg.negatives)?;
    let margins = batch
        .concepts
        .iter()
        .zip(&selection.negatives)
        .map(|(c, negs)| {
            let q = &batch.table[c.query];
            let pos = cosine(q, &batch.table[c.positive]).value;
            let worst = negs
                .iter()
                .map(|n| cosine(q, &batch.table[n.span]).value)
                .fold(f64::NEG_INFINITY, f64::max);
            pos - worst
        })
        .collect();
    Ok(ToyFit {
        table: batch.table,
        query_head,
        code_head,
        losses,
        selection,
        margins,
    })
}

fn apply(table: &mut [Vec<f64>], query_head: &mut ProbeHead, code_head: &mut ProbeHead, grads: &Gradients, lr: f64) {
    let step = |params: &mut [f64], g: &[f64]| {
        for (p, g) in params.iter_mut().zip(g) {
            *p -= lr * g;
        }
    };
    for (row, values) in table.iter_mut().enumerate() {
        if let Some(g) = grads.get(&embedding_key(row)) {
            step(values, g);
        }
    }
    for (head, prefix) in [(query_head, "query"), (code_head, "code")] {
        if let Some(g) = grads.get(&format!("{prefix}.weights")) {
            step(&mut head.weights, g);
        }
        if let Some(g) = grads.get(&format!("{prefix}.bias")) {
            head.bias -= lr * g[0];
        }
    }
}
