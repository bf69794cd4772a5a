use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{encode, ModelParams};
use crate::numerics::Matrix;

use super::Dataset;

/// Held-out retrieval and classification metrics, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at_1_i2t: f64,
    pub recall_at_1_t2i: f64,
    pub zero_shot_accuracy: f64,
}

impl RetrievalMetrics {
    /// Mean of the two retrieval directions.
    pub fn recall_at_1(&self) -> f64 {
        0.5 * (self.recall_at_1_i2t + self.recall_at_1_t2i)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose largest entry is on the diagonal.
pub fn recall_at_1(scores: &Matrix) -> Result<f64> {
    ensure!(
        scores.rows() == scores.cols() && scores.rows() >= 1,
        "recall needs a non-empty square score matrix, got {:?}",
        scores.shape()
    );
    let hits = (0..scores.rows())
        .filter(|&i| argmax(scores.row(i)) == i)
        .count();
    Ok(hits as f64 / scores.rows() as f64)
}

/// Fraction of rows of `scores` (examples × classes) whose argmax equals the label.
pub fn zero_shot_accuracy(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    ensure!(
        scores.rows() == labels.len() && !labels.is_empty(),
        "need one label per score row"
    );
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &c)| argmax(scores.row(i)) == c)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Retrieval in both directions over the pairs of `eval`, plus zero-shot
/// concept accuracy against the class prototypes encoded by the text tower.
pub fn evaluate_retrieval(model: &ModelParams, eval: &Dataset) -> Result<RetrievalMetrics> {
    ensure!(!eval.is_empty(), "evaluation set is empty");
    let logits = model.logits(&eval.pairs()?)?;
    let zi = encode(&model.image, &eval.image)?;
    let classes = encode(&model.text, &eval.class_text)?;
    let class_scores = zi.matmul_t(&classes)?;
    Ok(RetrievalMetrics {
        recall_at_1_i2t: recall_at_1(&logits)?,
        recall_at_1_t2i: recall_at_1(&logits.transpose())?,
        zero_shot_accuracy: zero_shot_accuracy(&class_scores, &eval.concepts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_resolve_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let dup = Matrix::filled(3, 3, 0.5);
        assert!((recall_at_1(&dup).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_1(&Matrix::identity(4)).unwrap(), 1.0);
        let anti = Matrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(recall_at_1(&anti).unwrap(), 0.0);
        assert!(recall_at_1(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_shot_examples() {
        let s = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let acc = zero_shot_accuracy(&s, &[1, 0, 0]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }
}
