//! Numerical check that curating by a reference model is distillation from it.
//!
//! For a one-hot single-direction softmax loss, selecting example `x` with
//! probability `a(x) = exp(s(x))/Z` and training on it gives the expected loss
//! `Σ a(x)·L(x)`, which equals `(1/Z)·Σ w(x)·KD[p(x)·y(x); q(x)]`: a
//! cross-entropy against the reference's target-masked probabilities,
//! weighted by `w = 1` (easy-reference) or `w = 1/q_ii` (learnability).
//!
//! For losses without one-hot targets (two-direction softmax, sigmoid) only
//! an inequality holds; [`verify_equivalence`] reports both sides and leaves
//! the direction to the caller.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::Scoring;
use crate::error::{ensure, Error, Result};
use crate::model::{ModelParams, ModelShape, PairBatch};
use crate::numerics::{sigmoid, Matrix, RngStream};
use crate::objectives::{
    contrastive_loss, pairwise_probabilities, ContrastiveKind, ProbabilityMode,
};

/// Per-example selection probabilities over a fixed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDistribution {
    pub weights: Vec<f64>,
    pub partition: f64,
}

impl SelectionDistribution {
    /// Normalizes `exp(log_scores)` with a max shift; `partition` is reported unshifted.
    fn from_log_scores(log_scores: &[f64]) -> Result<Self> {
        ensure!(
            log_scores.iter().all(|v| v.is_finite()),
            "selection scores must be finite"
        );
        let log_z = crate::numerics::logsumexp(log_scores)?;
        Ok(Self {
            weights: log_scores.iter().map(|&s| (s - log_z).exp()).collect(),
            partition: log_z.exp(),
        })
    }
}

/// Which loss the curated objective is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleObjective {
    /// Single-direction softmax with one-hot labels (the exact case).
    ImageToText,
    /// Mean of image→text and text→image softmax cross-entropies.
    TwoDirectionSoftmax,
    /// Pairwise sigmoid loss.
    Sigmoid,
}

impl std::fmt::Display for OracleObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleObjective::ImageToText => "image_to_text",
            OracleObjective::TwoDirectionSoftmax => "two_direction_softmax",
            OracleObjective::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleCase {
    EasyRefSoftmax,
    LearnabilitySoftmax,
    General,
}

impl std::fmt::Display for OracleCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleCase::EasyRefSoftmax => "easy_ref_softmax",
            OracleCase::LearnabilitySoftmax => "learnability_softmax",
            OracleCase::General => "general",
        })
    }
}

/// Expected curated loss (`lhs`) against the distillation-side objective (`rhs`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub case: OracleCase,
    pub scoring: Scoring,
    pub objective: OracleObjective,
    pub b: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub relative_gap: f64,
}

impl EquivalenceReport {
    fn new(scoring: Scoring, objective: OracleObjective, b: usize, lhs: f64, rhs: f64) -> Self {
        let case = match (objective, scoring) {
            (OracleObjective::ImageToText, Scoring::EasyRef) => OracleCase::EasyRefSoftmax,
            (OracleObjective::ImageToText, Scoring::Learnability) => OracleCase::LearnabilitySoftmax,
            _ => OracleCase::General,
        };
        Self {
            case,
            scoring,
            objective,
            b,
            lhs,
            rhs,
            relative_gap: (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300),
        }
    }
}

fn diagonal_row_log_softmax(logits: &Matrix) -> Result<Vec<f64>> {
    (0..logits.rows())
        .map(|i| Ok(logits[(i, i)] - crate::numerics::logsumexp(logits.row(i))?))
        .collect()
}

fn check_pair(reference: &Matrix, student: Option<&Matrix>) -> Result<()> {
    ensure!(
        reference.rows() == reference.cols() && reference.rows() >= 1,
        "reference logits must be a non-empty square matrix"
    );
    if let Some(s) = student {
        ensure!(s.shape() == reference.shape(), "student and reference logits differ in shape");
    }
    Ok(())
}

/// `a_i ∝ p_ii` (easy-reference) or `a_i ∝ p_ii / q_ii` (learnability) under
/// row-softmax probabilities.
pub fn selection_weights_from_logits(
    reference: &Matrix,
    student: Option<&Matrix>,
    scoring: Scoring,
) -> Result<SelectionDistribution> {
    check_pair(reference, student)?;
    let log_p = diagonal_row_log_softmax(reference)?;
    let log_scores = match scoring {
        Scoring::EasyRef => log_p,
        Scoring::Learnability => {
            let student = student.ok_or_else(|| Error::invalid("learnability needs student logits"))?;
            let log_q = diagonal_row_log_softmax(student)?;
            log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect()
        }
    };
    SelectionDistribution::from_log_scores(&log_scores)
}

/// `Σ_i a_i·(−log q_ii)` with the student's per-example image→text loss.
pub fn expected_curated_loss_from_logits(
    reference: &Matrix,
    student: &Matrix,
    scoring: Scoring,
) -> Result<f64> {
    let a = selection_weights_from_logits(reference, Some(student), scoring)?;
    let log_q = diagonal_row_log_softmax(student)?;
    Ok(a.weights.iter().zip(&log_q).map(|(w, lq)| -w * lq).sum())
}

/// `(1/Z)·Σ_i w_i·KD[p_i·y_i; q_i]` evaluated from probability matrices,
/// with `w_i = 1` (easy-reference) or `1/q_ii` (learnability) and `Z` the
/// selection partition.
pub fn implicit_kd_objective_from_logits(
    reference: &Matrix,
    student: &Matrix,
    scoring: Scoring,
) -> Result<f64> {
    check_pair(reference, Some(student))?;
    let b = reference.rows();
    let p = pairwise_probabilities(reference, ProbabilityMode::ImageToText)?;
    let q = pairwise_probabilities(student, ProbabilityMode::ImageToText)?;
    let labels = Matrix::identity(b);
    let mut total = 0.0;
    let mut partition = 0.0;
    for i in 0..b {
        let kd: f64 = (0..b)
            .filter(|&j| labels[(i, j)] != 0.0)
            .map(|j| -p[(i, j)] * labels[(i, j)] * q[(i, j)].ln())
            .sum();
        let (hard, weight) = match scoring {
            Scoring::EasyRef => (1.0, p[(i, i)]),
            Scoring::Learnability => (1.0 / q[(i, i)], p[(i, i)] / q[(i, i)]),
        };
        total += hard * kd;
        partition += weight;
    }
    Ok(total / partition)
}

fn require_exact(mode: ProbabilityMode) -> Result<()> {
    if mode == ProbabilityMode::Sigmoid {
        return Err(Error::Unsupported(
            "the curation/distillation identity is exact only for one-hot softmax; use verify_equivalence".into(),
        ));
    }
    Ok(())
}

fn oriented_logits(model: &ModelParams, batch: &PairBatch, mode: ProbabilityMode) -> Result<Matrix> {
    let l = model.logits(batch)?;
    Ok(match mode {
        ProbabilityMode::TextToImage => l.transpose(),
        _ => l,
    })
}

/// Selection weights for a single-direction softmax loss (`mode` picks the direction).
pub fn selection_weights(
    batch: &PairBatch,
    reference: &ModelParams,
    student: Option<&ModelParams>,
    scoring: Scoring,
    mode: ProbabilityMode,
) -> Result<SelectionDistribution> {
    require_exact(mode)?;
    let r = oriented_logits(reference, batch, mode)?;
    let s = student.map(|m| oriented_logits(m, batch, mode)).transpose()?;
    selection_weights_from_logits(&r, s.as_ref(), scoring)
}

pub fn expected_curated_loss(
    batch: &PairBatch,
    reference: &ModelParams,
    student: &ModelParams,
    scoring: Scoring,
    mode: ProbabilityMode,
) -> Result<f64> {
    require_exact(mode)?;
    expected_curated_loss_from_logits(
        &oriented_logits(reference, batch, mode)?,
        &oriented_logits(student, batch, mode)?,
        scoring,
    )
}

pub fn implicit_kd_objective(
    batch: &PairBatch,
    reference: &ModelParams,
    student: &ModelParams,
    scoring: Scoring,
    mode: ProbabilityMode,
) -> Result<f64> {
    require_exact(mode)?;
    implicit_kd_objective_from_logits(
        &oriented_logits(reference, batch, mode)?,
        &oriented_logits(student, batch, mode)?,
        scoring,
    )
}

/// Mean target probability of each example: the quantity whose logarithm's
/// average is `−L(x)`.
fn mean_target_probability(logits: &Matrix, objective: OracleObjective) -> Result<Vec<f64>> {
    let b = logits.rows();
    Ok(match objective {
        OracleObjective::ImageToText => {
            let p = pairwise_probabilities(logits, ProbabilityMode::ImageToText)?;
            (0..b).map(|i| p[(i, i)]).collect()
        }
        OracleObjective::TwoDirectionSoftmax => {
            let r = pairwise_probabilities(logits, ProbabilityMode::ImageToText)?;
            let c = pairwise_probabilities(logits, ProbabilityMode::TextToImage)?;
            (0..b).map(|i| 0.5 * (r[(i, i)] + c[(i, i)])).collect()
        }
        OracleObjective::Sigmoid => (0..b)
            .map(|i| {
                let off: f64 = (0..b)
                    .filter(|&j| j != i)
                    .map(|j| sigmoid(-logits[(i, j)]))
                    .sum();
                (sigmoid(logits[(i, i)]) + off) / b as f64
            })
            .collect(),
    })
}

fn per_example_loss(logits: &Matrix, objective: OracleObjective) -> Result<Vec<f64>> {
    Ok(match objective {
        OracleObjective::ImageToText => diagonal_row_log_softmax(logits)?
            .into_iter()
            .map(|v| -v)
            .collect(),
        OracleObjective::TwoDirectionSoftmax => {
            contrastive_loss(logits, ContrastiveKind::Softmax)?.per_example
        }
        OracleObjective::Sigmoid => contrastive_loss(logits, ContrastiveKind::Sigmoid)?.per_example,
    })
}

/// Compares `Σ a(x)·L(x)` with `(1/Z)·Σ p̄(x)·w(x)·L(x)`, where `a ∝ exp(s)`,
/// `p̄` is the reference's mean target probability and `w` is `1` or
/// `exp(L_student(x))`. The two agree exactly for the one-hot objective; for
/// the others `exp(−L_ref) ≤ p̄` termwise, so `lhs ≤ rhs`.
pub fn verify_equivalence(
    batch: &PairBatch,
    reference: &ModelParams,
    student: &ModelParams,
    scoring: Scoring,
    objective: OracleObjective,
) -> Result<EquivalenceReport> {
    let b = batch.len();
    let (lhs, rhs) = if objective == OracleObjective::ImageToText {
        let mode = ProbabilityMode::ImageToText;
        (
            expected_curated_loss(batch, reference, student, scoring, mode)?,
            implicit_kd_objective(batch, reference, student, scoring, mode)?,
        )
    } else {
        let lr = reference.logits(batch)?;
        let ls = student.logits(batch)?;
        let ref_loss = per_example_loss(&lr, objective)?;
        let student_loss = per_example_loss(&ls, objective)?;
        let log_scores: Vec<f64> = match scoring {
            Scoring::EasyRef => ref_loss.iter().map(|r| -r).collect(),
            Scoring::Learnability => ref_loss
                .iter()
                .zip(&student_loss)
                .map(|(r, s)| s - r)
                .collect(),
        };
        let a = SelectionDistribution::from_log_scores(&log_scores)?;
        let lhs = a.weights.iter().zip(&student_loss).map(|(w, l)| w * l).sum();
        let p_bar = mean_target_probability(&lr, objective)?;
        let rhs = p_bar
            .iter()
            .zip(&student_loss)
            .map(|(p, l)| match scoring {
                Scoring::EasyRef => p * l,
                Scoring::Learnability => p * l.exp() * l,
            })
            .sum::<f64>()
            / a.partition;
        (lhs, rhs)
    };
    Ok(EquivalenceReport::new(scoring, objective, b, lhs, rhs))
}

/// Settings for a batch of random oracle instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSweep {
    pub instances: usize,
    pub batch_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for OracleSweep {
    fn default() -> Self {
        Self {
            instances: 100,
            batch_sizes: vec![2, 4, 8],
            feature_dim: 6,
            hidden_dim: 8,
            embed_dim: 4,
            seed: 0,
        }
    }
}

/// One random model pair and batch per instance; each instance is checked for
/// every scoring rule and objective.
pub fn run_sweep(sweep: &OracleSweep) -> Result<Vec<EquivalenceReport>> {
    ensure!(!sweep.batch_sizes.is_empty(), "oracle sweep needs batch sizes");
    let shape = ModelShape::symmetric(
        sweep.feature_dim,
        sweep.feature_dim,
        sweep.hidden_dim,
        sweep.embed_dim,
    );
    let root = RngStream::new(sweep.seed);
    let mut reports = Vec::with_capacity(sweep.instances * 6);
    for k in 0..sweep.instances {
        let b = sweep.batch_sizes[k % sweep.batch_sizes.len()];
        let stream = root.derive(k as u64);
        let mut g = stream.derive(0).generator();
        let mut reference = ModelParams::init(&shape, ContrastiveKind::Softmax, stream.derive(1))?;
        let mut student = ModelParams::init(&shape, ContrastiveKind::Softmax, stream.derive(2))?;
        reference.log_alpha = g.random_range(0.0..3.0);
        student.log_alpha = g.random_range(0.0..3.0);
        let feats = |g: &mut rand_chacha::ChaCha8Rng| {
            Matrix::from_fn(b, sweep.feature_dim, |_, _| g.random_range(-2.0..2.0))
        };
        let batch = PairBatch::new(feats(&mut g), feats(&mut g))?;
        for objective in [
            OracleObjective::ImageToText,
            OracleObjective::TwoDirectionSoftmax,
            OracleObjective::Sigmoid,
        ] {
            for scoring in [Scoring::EasyRef, Scoring::Learnability] {
                reports.push(verify_equivalence(&batch, &reference, &student, scoring, objective)?);
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_with_diagonal(p11: f64, p22: f64) -> Matrix {
        // Row i of a 2×2 logit matrix [[x, 0], [0, y]] has p_ii = σ(x) resp. σ(y).
        let logit = |p: f64| (p / (1.0 - p)).ln();
        Matrix::from_rows(&[vec![logit(p11), 0.0], vec![0.0, logit(p22)]]).unwrap()
    }

    #[test]
    fn weight_examples() {
        let uniform = Matrix::zeros(4, 4);
        let a = selection_weights_from_logits(&uniform, None, Scoring::EasyRef).unwrap();
        assert!(a.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));

        let r = logits_with_diagonal(0.9, 0.1);
        let a = selection_weights_from_logits(&r, None, Scoring::EasyRef).unwrap();
        assert!((a.weights[0] - 0.9).abs() < 1e-12 && (a.weights[1] - 0.1).abs() < 1e-12);
        assert!((a.partition - 1.0).abs() < 1e-12);

        let a = selection_weights_from_logits(&r, Some(&r), Scoring::Learnability).unwrap();
        assert!(a.weights.iter().all(|&w| (w - 0.5).abs() < 1e-15));
        assert!(selection_weights_from_logits(&r, None, Scoring::Learnability).is_err());
    }

    #[test]
    fn weights_are_shift_invariant() {
        let r = logits_with_diagonal(0.7, 0.2);
        let shifted = r.map(|v| v + 3.5);
        let a = selection_weights_from_logits(&r, None, Scoring::EasyRef).unwrap();
        let b = selection_weights_from_logits(&shifted, None, Scoring::EasyRef).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn learnability_reduces_to_easy_ref_for_flat_student() {
        let r = Matrix::from_rows(&[vec![2.0, 0.1, -1.0], vec![0.3, 0.5, 0.2], vec![-0.4, 1.0, 1.5]])
            .unwrap();
        let s = Matrix::zeros(3, 3);
        let a = selection_weights_from_logits(&r, Some(&s), Scoring::Learnability).unwrap();
        let e = selection_weights_from_logits(&r, None, Scoring::EasyRef).unwrap();
        for (x, y) in a.weights.iter().zip(&e.weights) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn objective_examples() {
        let perfect = Matrix::from_fn(3, 3, |i, j| if i == j { 800.0 } else { 0.0 });
        let r = Matrix::zeros(3, 3);
        assert_eq!(implicit_kd_objective_from_logits(&r, &perfect, Scoring::EasyRef).unwrap(), 0.0);

        let u = Matrix::zeros(2, 2);
        let rhs = implicit_kd_objective_from_logits(&u, &u, Scoring::EasyRef).unwrap();
        let lhs = expected_curated_loss_from_logits(&u, &u, Scoring::EasyRef).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((rhs - ln2).abs() < 1e-15, "{rhs}");
        assert!((lhs - ln2).abs() < 1e-15);
    }

    #[test]
    fn self_distillation_matches_entropy_form() {
        let r = Matrix::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 2.0, 0.3], vec![0.7, 0.1, -1.0]])
            .unwrap();
        let p = pairwise_probabilities(&r, ProbabilityMode::ImageToText).unwrap();
        let z: f64 = (0..3).map(|i| p[(i, i)]).sum();
        let expect: f64 = (0..3).map(|i| -p[(i, i)] * p[(i, i)].ln()).sum::<f64>() / z;
        let lhs = expected_curated_loss_from_logits(&r, &r, Scoring::EasyRef).unwrap();
        let rhs = implicit_kd_objective_from_logits(&r, &r, Scoring::EasyRef).unwrap();
        assert!((lhs - expect).abs() < 1e-14 && (rhs - expect).abs() < 1e-14);
    }

    #[test]
    fn sigmoid_direction_is_unsupported_for_exact_case() {
        let shape = ModelShape::symmetric(3, 3, 4, 2);
        let m = ModelParams::init(&shape, ContrastiveKind::Sigmoid, RngStream::new(1)).unwrap();
        let batch = PairBatch::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        assert!(matches!(
            selection_weights(&batch, &m, None, Scoring::EasyRef, ProbabilityMode::Sigmoid),
            Err(Error::Unsupported(_))
        ));
        let t2i = selection_weights(&batch, &m, None, Scoring::EasyRef, ProbabilityMode::TextToImage)
            .unwrap();
        assert!((t2i.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_identity_and_bound() {
        let reports = run_sweep(&OracleSweep {
            instances: 30,
            ..OracleSweep::default()
        })
        .unwrap();
        assert_eq!(reports.len(), 180);
        for r in &reports {
            match r.case {
                OracleCase::General => assert!(r.lhs <= r.rhs * (1.0 + 1e-12), "{r:?}"),
                _ => assert!(r.relative_gap < 1e-10, "{r:?}"),
            }
        }
    }
}
