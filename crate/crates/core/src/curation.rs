//! Reference-model batch scoring and chunked joint batch selection.
//!
//! A mini-batch of size `b` is drawn from a super-batch of size `B` in `n`
//! chunks. The first chunk is sampled from singleton scores `s({x})`; each
//! later chunk from the conditional scores `s(partial ∪ {x})` of the
//! remaining candidates. Within a chunk, candidates are drawn without
//! replacement with weights `∝ exp(τ·s)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelParams, PairBatch};
use crate::numerics::Matrix;
use crate::objectives::{contrastive_loss, ContrastiveKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `s(B) = −L(B | reference)`.
    EasyRef,
    /// `s(B) = L(B | student) − L(B | reference)`.
    Learnability,
}

impl std::fmt::Display for Scoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scoring::EasyRef => "easy_ref",
            Scoring::Learnability => "learnability",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub super_batch_size: usize,
    pub mini_batch_size: usize,
    pub chunks: usize,
    /// Inverse sampling temperature: weights are `exp(τ·score)`. `0` is
    /// uniform; `f64::INFINITY` is deterministic top-k.
    pub temperature: f64,
    pub scoring: Scoring,
    pub loss_kind: ContrastiveKind,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            super_batch_size: 160,
            mini_batch_size: 32,
            chunks: 16,
            temperature: 10.0,
            scoring: Scoring::Learnability,
            loss_kind: ContrastiveKind::Softmax,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let (big, b, n) = (self.super_batch_size, self.mini_batch_size, self.chunks);
        ensure!(b >= 1, "mini_batch_size must be positive");
        ensure!(b <= big, "mini_batch_size {b} exceeds super_batch_size {big}");
        ensure!(n >= 1 && b % n == 0, "chunks {n} must divide mini_batch_size {b}");
        ensure!(
            self.temperature >= 0.0 && !self.temperature.is_nan(),
            "temperature must be non-negative, got {}",
            self.temperature
        );
        Ok(())
    }

    /// `f = 1 − b/B`.
    pub fn filtering_ratio(&self) -> f64 {
        filtering_ratio(self.mini_batch_size, self.super_batch_size)
    }

    pub fn chunk_size(&self) -> usize {
        self.mini_batch_size / self.chunks
    }
}

/// `f = 1 − b/B`.
pub fn filtering_ratio(mini_batch: usize, super_batch: usize) -> f64 {
    1.0 - mini_batch as f64 / super_batch as f64
}

/// Super-batch size `B = b/(1 − f)`; errors unless `B` is integral.
pub fn super_batch_size(mini_batch: usize, ratio: f64) -> Result<usize> {
    ensure!(
        (0.0..1.0).contains(&ratio),
        "filtering ratio must lie in [0, 1), got {ratio}"
    );
    let exact = mini_batch as f64 / (1.0 - ratio);
    let rounded = exact.round();
    ensure!(
        (exact - rounded).abs() <= 1e-9 * exact.max(1.0),
        "b = {mini_batch} with f = {ratio} gives non-integral super-batch {exact}"
    );
    Ok(rounded as usize)
}

/// Score of one super-batch member at the moment it was selected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub score: f64,
}

/// The models a score depends on. `student` is only consulted for learnability.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    pub scoring: Scoring,
    pub loss_kind: ContrastiveKind,
    pub reference: &'a ModelParams,
    pub student: Option<&'a ModelParams>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        scoring: Scoring,
        loss_kind: ContrastiveKind,
        reference: Option<&'a ModelParams>,
        student: Option<&'a ModelParams>,
    ) -> Result<Self> {
        let reference = reference.ok_or_else(|| Error::invalid("scoring requires a reference model"))?;
        if scoring == Scoring::Learnability && student.is_none() {
            return Err(Error::invalid("learnability scoring requires the student model"));
        }
        Ok(Self {
            scoring,
            loss_kind,
            reference,
            student,
        })
    }

    fn combine(&self, student_loss: Option<f64>, reference_loss: f64) -> f64 {
        match self.scoring {
            Scoring::EasyRef => -reference_loss,
            Scoring::Learnability => student_loss.expect("student loss present") - reference_loss,
        }
    }

    /// Score of a whole batch from its logit matrices.
    fn score_logits(&self, student: Option<&Matrix>, reference: &Matrix) -> Result<f64> {
        let r = contrastive_loss(reference, self.loss_kind)?.total;
        let s = match student {
            Some(l) => Some(contrastive_loss(l, self.loss_kind)?.total),
            None => None,
        };
        Ok(self.combine(s, r))
    }

    fn needs_student(&self) -> bool {
        self.scoring == Scoring::Learnability
    }

    pub fn score(&self, batch: &PairBatch) -> Result<f64> {
        let reference = self.reference.logits(batch)?;
        let student = match self.needs_student() {
            true => Some(self.student.expect("checked in new").logits(batch)?),
            false => None,
        };
        self.score_logits(student.as_ref(), &reference)
    }
}

/// Batch score under the chosen rule, using mean per-example contrastive losses.
pub fn score_batch(
    batch: &PairBatch,
    student: Option<&ModelParams>,
    reference: Option<&ModelParams>,
    scoring: Scoring,
    loss_kind: ContrastiveKind,
) -> Result<f64> {
    Scorer::new(scoring, loss_kind, reference, student)?.score(batch)
}

fn concat(a: &PairBatch, b: &PairBatch) -> Result<PairBatch> {
    let stack = |x: &Matrix, y: &Matrix| -> Result<Matrix> {
        ensure!(x.cols() == y.cols(), "batches differ in feature width");
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        Matrix::new(x.rows() + y.rows(), x.cols(), data)
    };
    PairBatch::new(stack(a.image(), b.image())?, stack(a.text(), b.text())?)
}

/// `s(partial ∪ {x})` for every candidate row `x`, recomputed from the raw
/// features. With no partial batch these are the singleton scores.
pub fn conditional_scores(
    partial: Option<&PairBatch>,
    candidates: &PairBatch,
    scorer: &Scorer<'_>,
) -> Result<Vec<f64>> {
    (0..candidates.len())
        .into_par_iter()
        .map(|x| {
            let single = candidates.select(&[x])?;
            let union = match partial {
                Some(p) => concat(p, &single)?,
                None => single,
            };
            scorer.score(&union)
        })
        .collect()
}

/// Draws `k` distinct positions with weights `∝ exp(τ·score)`, one at a time,
/// renormalizing over the remainder after each draw.
pub fn sample_chunk<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    ensure!(k <= scores.len(), "cannot draw {k} of {} candidates", scores.len());
    ensure!(
        temperature >= 0.0 && !temperature.is_nan(),
        "temperature must be non-negative"
    );
    ensure!(scores.iter().all(|s| s.is_finite()), "scores must be finite");
    let log_w: Vec<f64> = scores.iter().map(|&s| temperature * s).collect();
    if temperature == f64::INFINITY || log_w.iter().any(|w| !w.is_finite()) {
        return Ok(top_k(scores, k));
    }
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut picked = Vec::with_capacity(k);
    let mut weights = vec![0.0; scores.len()];
    for _ in 0..k {
        let max = remaining
            .iter()
            .map(|&i| log_w[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, &i) in weights.iter_mut().zip(&remaining) {
            *w = (log_w[i] - max).exp();
            total += *w;
        }
        let mut u = rng.random::<f64>() * total;
        let mut slot = remaining.len() - 1;
        for (pos, &w) in weights[..remaining.len()].iter().enumerate() {
            if u < w {
                slot = pos;
                break;
            }
            u -= w;
        }
        // Rounding can leave `u` just past the last positive weight.
        while weights[slot] == 0.0 {
            slot -= 1;
        }
        picked.push(remaining.remove(slot));
    }
    Ok(picked)
}

/// Positions of the `k` largest scores, ties to the lowest position.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Selected super-batch indices in selection order, with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub picked: Vec<ScoredCandidate>,
}

impl Selection {
    pub fn indices(&self) -> Vec<usize> {
        self.picked.iter().map(|c| c.index).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.picked.iter().map(|c| c.score).collect()
    }
}

/// Full super-batch logit matrices, computed once. Any sub-batch's logits are
/// the corresponding square gather, identical bit for bit to recomputing them
/// from features because every logit depends only on its own row pair.
struct LogitCache {
    reference: Matrix,
    student: Option<Matrix>,
}

impl LogitCache {
    fn new(super_batch: &PairBatch, scorer: &Scorer<'_>) -> Result<Self> {
        let student = match scorer.needs_student() {
            true => Some(scorer.student.expect("checked in new").logits(super_batch)?),
            false => None,
        };
        Ok(Self {
            reference: scorer.reference.logits(super_batch)?,
            student,
        })
    }

    fn score(&self, scorer: &Scorer<'_>, indices: &[usize]) -> Result<f64> {
        let reference = self.reference.select_square(indices);
        let student = self.student.as_ref().map(|s| s.select_square(indices));
        scorer.score_logits(student.as_ref(), &reference)
    }
}

/// Blocked-Gibbs joint selection of `mini_batch_size` distinct indices.
pub fn joint_batch_select<R: Rng + ?Sized>(
    super_batch: &PairBatch,
    config: &SelectionConfig,
    student: Option<&ModelParams>,
    reference: Option<&ModelParams>,
    rng: &mut R,
) -> Result<Selection> {
    config.validate()?;
    ensure!(
        super_batch.len() == config.super_batch_size,
        "super-batch has {} rows, config expects {}",
        super_batch.len(),
        config.super_batch_size
    );
    let scorer = Scorer::new(config.scoring, config.loss_kind, reference, student)?;
    let cache = LogitCache::new(super_batch, &scorer)?;
    let chunk = config.chunk_size();
    let mut selected: Vec<usize> = Vec::with_capacity(config.mini_batch_size);
    let mut picked = Vec::with_capacity(config.mini_batch_size);
    let mut remaining: Vec<usize> = (0..super_batch.len()).collect();
    for _ in 0..config.chunks {
        let scores: Vec<f64> = remaining
            .par_iter()
            .map(|&x| {
                let mut union = selected.clone();
                union.push(x);
                cache.score(&scorer, &union)
            })
            .collect::<Result<_>>()?;
        let mut positions = sample_chunk(&scores, chunk, config.temperature, rng)?;
        for &p in &positions {
            selected.push(remaining[p]);
            picked.push(ScoredCandidate {
                index: remaining[p],
                score: scores[p],
            });
        }
        positions.sort_unstable();
        for p in positions.into_iter().rev() {
            remaining.remove(p);
        }
    }
    Ok(Selection { picked })
}
