//! Query concept extraction: per-token highlight probabilities from a linear
//! probe head, then centroid-linkage agglomerative clustering of the
//! highlighted tokens.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, dot, span_embedding, EmbedResponse, Embedding};
use crate::error::{Error, Result};
use crate::model::TextKind;

/// Default highlight threshold.
pub const DELTA_HIGHLIGHT: f64 = 0.4;
/// Default cluster-merge threshold.
pub const DELTA_CLUSTER: f64 = 0.8;

const HEAD_MAGIC: &[u8; 4] = b"CSPH";
const HEAD_VERSION: u32 = 1;
/// Standard deviation of seeded head weights.
pub const SEEDED_HEAD_SCALE: f64 = 3.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear probe producing `p = sigmoid(w·h + b)` per token.
///
/// Queries and code use separate heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub kind: TextKind,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeHead {
    pub fn new(kind: TextKind, weights: Vec<f64>, bias: f64) -> Self {
        ProbeHead { kind, weights, bias }
    }

    pub fn zeros(kind: TextKind, dimension: usize) -> Self {
        ProbeHead::new(kind, vec![0.0; dimension], 0.0)
    }

    /// Gaussian weights with standard deviation [`SEEDED_HEAD_SCALE`], zero bias.
    pub fn seeded(kind: TextKind, dimension: usize, seed: u64) -> Self {
        let stream = match kind {
            TextKind::Query => 0,
            TextKind::Code => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, SEEDED_HEAD_SCALE).expect("positive scale");
        let weights = (0..dimension).map(|_| normal.sample(&mut rng)).collect();
        ProbeHead::new(kind, weights, 0.0)
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, hidden: &[f64]) -> f64 {
        dot(&self.weights, hidden) + self.bias
    }

    pub fn probability(&self, hidden: &[f64]) -> f64 {
        sigmoid(self.logit(hidden))
    }

    /// Little-endian artifact: magic, version (u32), kind (u8: 0 query,
    /// 1 code), dimension (u32), weights (f64 each), bias (f64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 8 * (self.weights.len() + 1));
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        out.push(match self.kind {
            TextKind::Query => 0,
            TextKind::Code => 1,
        });
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.bias.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 13 || &bytes[..4] != HEAD_MAGIC {
            return Err("missing probe head magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != HEAD_VERSION {
            return Err(format!("unsupported probe head version {version}"));
        }
        let kind = match bytes[8] {
            0 => TextKind::Query,
            1 => TextKind::Code,
            k => return Err(format!("unknown head kind byte {k}")),
        };
        let dimension = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let expected = 13 + 8 * (dimension + 1);
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes for dimension {dimension}, found {}", bytes.len()));
        }
        let floats: Vec<f64> = bytes[13..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (weights, bias) = floats.split_at(dimension);
        Ok(ProbeHead::new(kind, weights.to_vec(), bias[0]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ProbeHead::from_bytes(&bytes).map_err(|reason| Error::format("probe head", path, reason))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Hex SHA-256 of the serialized head.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Per-token highlight probabilities, parallel to the embedded tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightScores {
    pub kind: TextKind,
    pub scores: Vec<f64>,
}

impl HighlightScores {
    pub fn selected(&self, delta_highlight: f64) -> Vec<usize> {
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > delta_highlight)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn score_highlights(resp: &EmbedResponse, head: &ProbeHead) -> Result<HighlightScores> {
    if head.dimension() != resp.dimension {
        return Err(Error::Contract(format!(
            "probe head dimension {} does not match provider dimension {}",
            head.dimension(),
            resp.dimension
        )));
    }
    Ok(HighlightScores {
        kind: head.kind,
        scores: resp.embeddings.iter().map(|h| head.probability(h)).collect(),
    })
}

/// One query concept: member token indices and their mean embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConcept {
    /// Ascending token indices.
    pub members: Vec<usize>,
    pub centroid: Embedding,
    /// Set when no token passed the highlight threshold; members are then
    /// every query token.
    pub fallback: bool,
}

/// Groups highlighted query tokens into concepts.
///
/// Tokens with `p > delta_highlight` start as singletons. The pair of
/// clusters with the highest centroid cosine is merged while that cosine
/// exceeds `delta_cluster`; centroids are recomputed after each merge. Ties
/// go to the pair with the lowest first-cluster minimum token, then the
/// lowest second-cluster minimum. Concepts are returned ordered by their
/// smallest member.
///
/// If nothing passes the threshold, one fallback concept covering the whole
/// query is returned.
pub fn cluster_concepts(
    resp: &EmbedResponse,
    scores: &HighlightScores,
    delta_highlight: f64,
    delta_cluster: f64,
) -> Result<Vec<QueryConcept>> {
    if scores.scores.len() != resp.embeddings.len() {
        return Err(Error::Contract(format!(
            "{} highlight scores for {} tokens",
            scores.scores.len(),
            resp.embeddings.len()
        )));
    }
    if resp.embeddings.is_empty() {
        return Ok(Vec::new());
    }

    let selected = scores.selected(delta_highlight);
    if selected.is_empty() {
        let all: Vec<usize> = (0..resp.embeddings.len()).collect();
        return Ok(vec![QueryConcept {
            centroid: span_embedding(&resp.embeddings, &all)?,
            members: all,
            fallback: true,
        }]);
    }

    let mut clusters: Vec<Vec<usize>> = selected.iter().map(|&i| vec![i]).collect();
    let mut centroids: Vec<Embedding> = selected.iter().map(|&i| resp.embeddings[i].clone()).collect();
    // sims[i][j] for i < j; clusters stay sorted by their minimum member.
    let mut sims: Vec<Vec<f64>> = (0..clusters.len())
        .map(|i| {
            (0..clusters.len())
                .map(|j| if j > i { cosine(&centroids[i], &centroids[j]).value } else { f64::NAN })
                .collect()
        })
        .collect();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let s = sims[i][j];
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((i, j, s));
                }
            }
        }
        let Some((i, j, s)) = best else { break };
        if !(s > delta_cluster) {
            break;
        }

        let absorbed = clusters.remove(j);
        centroids.remove(j);
        sims.remove(j);
        for row in &mut sims {
            row.remove(j);
        }
        clusters[i].extend(absorbed);
        clusters[i].sort_unstable();
        centroids[i] = span_embedding(&resp.embeddings, &clusters[i])?;
        for k in 0..clusters.len() {
            if k < i {
                sims[k][i] = cosine(&centroids[k], &centroids[i]).value;
            } else if k > i {
                sims[i][k] = cosine(&centroids[i], &centroids[k]).value;
            }
        }
    }

    Ok(clusters
        .into_iter()
        .zip(centroids)
        .map(|(members, centroid)| QueryConcept {
            members,
            centroid,
            fallback: false,
        })
        .collect())
}
