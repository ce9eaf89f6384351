use serde::{Deserialize, Serialize};

use super::{embedding_key, Gradients, LossReport};
use crate::error::{Error, Result};
use crate::query::ProbeHead;

/// Focal-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    /// Weight of the positive class, in (0, 1).
    pub alpha: f64,
    /// Focusing exponent, ≥ 0.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.5, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        let p = FocalParams { alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("focal alpha {} not in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Domain(format!("focal gamma {} must be finite and >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// `x^γ`, with the `γ = 0` case pinned to 1 (including `x = 0`).
fn pow(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        x.powf(gamma)
    }
}

/// Focal loss summed over tokens, with `dL/dp` in block `"p"`.
///
/// `L = -Σ [α(1-p)^γ·y·ln p + (1-α)·p^γ·(1-y)·ln(1-p)]`
///
/// With `γ = 0, α = 0.5` this is exactly half the binary cross-entropy sum.
pub fn focal_loss(p: &[f64], y: &[bool], params: FocalParams) -> Result<LossReport> {
    params.validate()?;
    if p.len() != y.len() {
        return Err(Error::Contract(format!("{} probabilities for {} labels", p.len(), y.len())));
    }
    let FocalParams { alpha, gamma } = params;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Domain(format!("probability {pi} not in (0, 1)")));
        }
        if yi {
            let q = 1.0 - pi;
            loss -= alpha * pow(q, gamma) * pi.ln();
            let focus = if gamma == 0.0 { 0.0 } else { alpha * gamma * pow(q, gamma - 1.0) * pi.ln() };
            grad.push(focus - alpha * pow(q, gamma) / pi);
        } else {
            let q = 1.0 - pi;
            loss -= (1.0 - alpha) * pow(pi, gamma) * q.ln();
            let focus = if gamma == 0.0 {
                0.0
            } else {
                -(1.0 - alpha) * gamma * pow(pi, gamma - 1.0) * q.ln()
            };
            grad.push(focus + (1.0 - alpha) * pow(pi, gamma) / q);
        }
    }
    let mut gradients = Gradients::default();
    gradients.accumulate("p", &grad);
    Ok(LossReport {
        loss,
        gradients,
        ..Default::default()
    })
}

fn log_sigmoid(z: f64) -> f64 {
    // ln σ(z) = -softplus(-z)
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Focal loss of a probe head over rows of an embedding table.
///
/// Token `i` has hidden state `table[rows[i]]` and label `labels[i]`;
/// `p_i = σ(w·h + b)`. Gradients: `"<prefix>.weights"`, `"<prefix>.bias"`
/// and `emb.<row>` for every touched row. Computed in logit space, so
/// saturated probabilities stay finite.
pub fn highlight_loss(
    head: &ProbeHead,
    prefix: &str,
    table: &[Vec<f64>],
    rows: &[usize],
    labels: &[bool],
    params: FocalParams,
) -> Result<LossReport> {
    params.validate()?;
    if rows.len() != labels.len() {
        return Err(Error::Contract(format!("{} tokens for {} labels", rows.len(), labels.len())));
    }
    let FocalParams { alpha, gamma } = params;
    let dim = head.dimension();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; dim];
    let mut grad_b = 0.0;
    let mut gradients = Gradients::default();

    for (&row, &y) in rows.iter().zip(labels) {
        let h = table.get(row).ok_or(Error::Range {
            what: "embedding row",
            index: row,
            len: table.len(),
        })?;
        if h.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: h.len() });
        }
        let z = head.logit(h);
        let (ln_p, ln_q) = (log_sigmoid(z), log_sigmoid(-z));
        let (p, q) = (ln_p.exp(), ln_q.exp());
        let dz = if y {
            loss -= alpha * pow(q, gamma) * ln_p;
            alpha * gamma * p * pow(q, gamma) * ln_p - alpha * pow(q, gamma) * q
        } else {
            loss -= (1.0 - alpha) * pow(p, gamma) * ln_q;
            -(1.0 - alpha) * gamma * pow(p, gamma) * q * ln_q + (1.0 - alpha) * pow(p, gamma) * p
        };
        for (g, x) in grad_w.iter_mut().zip(h) {
            *g += dz * x;
        }
        grad_b += dz;
        let dh: Vec<f64> = head.weights.iter().map(|w| dz * w).collect();
        gradients.accumulate(embedding_key(row), &dh);
    }
    gradients.accumulate(format!("{prefix}.weights"), &grad_w);
    gradients.accumulate(format!("{prefix}.bias"), &[grad_b]);
    Ok(LossReport {
        loss,
        gradients,
        ..Default::default()
    })
}
