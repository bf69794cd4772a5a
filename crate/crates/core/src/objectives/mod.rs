//! Contrastive and distillation objectives with exact gradients.
//!
//! Losses are computed on logit matrices first (`contrastive_loss`, `kd_*`)
//! and lifted to model parameters by [`unified_loss`] / [`gradient`], which
//! backpropagate through the logits, the normalization and both towers.

mod kd;
mod unified;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{log_sigmoid_unchecked, logsumexp_unchecked, sigmoid, Matrix};

pub use kd::{kd_feature_match, kd_sigmoid, kd_softmax};
pub use unified::{gradient, unified_loss, KdConfig, KdKind, KdWeights, LossSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    /// Two-direction (image→text, text→image) softmax cross-entropy.
    Softmax,
    /// Pairwise binary cross-entropy over all `b²` logits.
    Sigmoid,
}

impl std::fmt::Display for ContrastiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContrastiveKind::Softmax => "softmax",
            ContrastiveKind::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbabilityMode {
    /// Row-wise softmax: each image's distribution over texts.
    ImageToText,
    /// Column-wise softmax: each text's distribution over images.
    TextToImage,
    /// Elementwise `σ(l_ij)`.
    Sigmoid,
}

/// Loss value plus its per-example decomposition and named sub-losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_example: Vec<f64>,
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

pub(crate) fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    ensure!(
        m.rows() == m.cols() && m.rows() >= 1,
        "{what} must be a non-empty square matrix, got {:?}",
        m.shape()
    );
    Ok(())
}

/// Row-wise log-softmax of a matrix.
pub(crate) fn row_log_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let lse = logsumexp_unchecked(m.row(i));
        out.row_mut(i).iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Column-wise log-softmax, returned in the original orientation.
pub(crate) fn col_log_softmax(m: &Matrix) -> Matrix {
    row_log_softmax(&m.transpose()).transpose()
}

pub fn pairwise_probabilities(logits: &Matrix, mode: ProbabilityMode) -> Result<Matrix> {
    ensure_square(logits, "logits")?;
    Ok(match mode {
        ProbabilityMode::ImageToText => row_log_softmax(logits).map(f64::exp),
        ProbabilityMode::TextToImage => col_log_softmax(logits).map(f64::exp),
        ProbabilityMode::Sigmoid => logits.map(sigmoid),
    })
}

/// Per-example contrastive losses on a `b × b` logit matrix with matches on
/// the diagonal; the total is their mean.
pub fn contrastive_loss(logits: &Matrix, kind: ContrastiveKind) -> Result<LossBreakdown> {
    ensure_square(logits, "logits")?;
    let per_example = per_example_losses(logits, kind);
    let total = per_example.iter().sum::<f64>() / per_example.len() as f64;
    let mut components = BTreeMap::new();
    components.insert("contrastive".to_string(), total);
    Ok(LossBreakdown {
        total,
        per_example,
        components,
    })
}

pub(crate) fn per_example_losses(logits: &Matrix, kind: ContrastiveKind) -> Vec<f64> {
    let b = logits.rows();
    match kind {
        ContrastiveKind::Softmax => {
            let t = logits.transpose();
            (0..b)
                .map(|i| {
                    let row = logsumexp_unchecked(logits.row(i)) - logits[(i, i)];
                    let col = logsumexp_unchecked(t.row(i)) - logits[(i, i)];
                    0.5 * (row + col)
                })
                .collect()
        }
        ContrastiveKind::Sigmoid => (0..b)
            .map(|i| {
                let mut loss = -log_sigmoid_unchecked(logits[(i, i)]);
                for j in (0..b).filter(|&j| j != i) {
                    loss -= log_sigmoid_unchecked(-logits[(i, j)]);
                }
                loss
            })
            .collect(),
    }
}

/// `∂(mean contrastive loss)/∂l`.
pub(crate) fn contrastive_logit_grad(logits: &Matrix, kind: ContrastiveKind) -> Matrix {
    let b = logits.rows();
    let inv_b = 1.0 / b as f64;
    match kind {
        ContrastiveKind::Softmax => {
            let rows = row_log_softmax(logits);
            let cols = col_log_softmax(logits);
            Matrix::from_fn(b, b, |i, j| {
                let y = if i == j { 1.0 } else { 0.0 };
                0.5 * inv_b * ((rows[(i, j)].exp() - y) + (cols[(i, j)].exp() - y))
            })
        }
        ContrastiveKind::Sigmoid => Matrix::from_fn(b, b, |i, j| {
            let y = if i == j { 1.0 } else { 0.0 };
            inv_b * (sigmoid(logits[(i, j)]) - y)
        }),
    }
}
