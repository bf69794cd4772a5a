//! `L_full = L_contrastive[B_CE] + λ · L_kd[B_KD]` and its gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelParams, PairBatch, TowerTrace};
use crate::numerics::Matrix;

use super::kd::{
    feature_match_with_grad, sigmoid_kd_with_grad, sigmoid_targets, softmax_kd_with_grad,
    SoftmaxTargets,
};
use super::{contrastive_logit_grad, per_example_losses, ContrastiveKind, LossBreakdown};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdKind {
    Softmax,
    Sigmoid,
    FeatureMatch,
}

/// Mixing weights of the distillation terms inside the KD loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdWeights {
    #[serde(default)]
    pub softmax: f64,
    #[serde(default)]
    pub sigmoid: f64,
    #[serde(default)]
    pub feature_match: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self::only(KdKind::Softmax)
    }
}

impl KdWeights {
    pub fn only(kind: KdKind) -> Self {
        let mut w = Self {
            softmax: 0.0,
            sigmoid: 0.0,
            feature_match: 0.0,
        };
        match kind {
            KdKind::Softmax => w.softmax = 1.0,
            KdKind::Sigmoid => w.sigmoid = 1.0,
            KdKind::FeatureMatch => w.feature_match = 1.0,
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.softmax, self.sigmoid, self.feature_match];
        ensure!(
            all.iter().all(|w| w.is_finite() && *w >= 0.0),
            "KD weights must be finite and non-negative: {self:?}"
        );
        ensure!(all.iter().any(|w| *w > 0.0), "at least one KD weight must be positive");
        Ok(())
    }
}

/// Distillation setup for one loss evaluation. Teachers are frozen; the
/// feature-matching head, when needed, is the student's `projection`.
#[derive(Clone, Copy, Debug)]
pub struct KdConfig<'a> {
    pub weights: KdWeights,
    pub teachers: &'a [ModelParams],
}

impl<'a> KdConfig<'a> {
    pub fn none() -> KdConfig<'static> {
        KdConfig {
            weights: KdWeights::default(),
            teachers: &[],
        }
    }

    pub fn new(weights: KdWeights, teachers: &'a [ModelParams]) -> Self {
        Self { weights, teachers }
    }
}

/// Everything [`unified_loss`] needs besides the student.
#[derive(Clone, Copy, Debug)]
pub struct LossSpec<'a> {
    pub batch_ce: &'a PairBatch,
    pub batch_kd: &'a PairBatch,
    pub kd: KdConfig<'a>,
    pub kind: ContrastiveKind,
    pub lambda: f64,
}

impl<'a> LossSpec<'a> {
    /// Contrastive-only objective on one batch.
    pub fn contrastive(batch: &'a PairBatch, kind: ContrastiveKind) -> Self {
        Self {
            batch_ce: batch,
            batch_kd: batch,
            kd: KdConfig::none(),
            kind,
            lambda: 0.0,
        }
    }
}

pub fn unified_loss(student: &ModelParams, spec: &LossSpec<'_>) -> Result<LossBreakdown> {
    Ok(evaluate(student, spec, false)?.0)
}

/// Loss and `∂L/∂θ` for every student parameter. Teachers receive no gradient.
pub fn gradient(student: &ModelParams, spec: &LossSpec<'_>) -> Result<(LossBreakdown, ModelParams)> {
    let (loss, grad) = evaluate(student, spec, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

struct Forward {
    img: TowerTrace,
    txt: TowerTrace,
    sim: Matrix,
    logits: Matrix,
}

fn forward(model: &ModelParams, batch: &PairBatch) -> Result<Forward> {
    let img = model.image.forward(batch.image())?;
    let txt = model.text.forward(batch.text())?;
    let sim = img.embed.matmul_t(&txt.embed)?;
    let (alpha, beta) = (model.alpha(), model.beta);
    let logits = sim.map(|s| alpha * s + beta);
    Ok(Forward {
        img,
        txt,
        sim,
        logits,
    })
}

/// Gradient contributions flowing into one student forward pass.
struct Upstream {
    d_logits: Option<Matrix>,
    d_img: Option<Matrix>,
    d_txt: Option<Matrix>,
}

fn backward(
    student: &ModelParams,
    batch: &PairBatch,
    fwd: &Forward,
    up: Upstream,
    grad: &mut ModelParams,
) -> Result<()> {
    let alpha = student.alpha();
    let (b, e) = (fwd.img.embed.rows(), fwd.img.embed.cols());
    let mut d_img = up.d_img.unwrap_or_else(|| Matrix::zeros(b, e));
    let mut d_txt = up.d_txt.unwrap_or_else(|| Matrix::zeros(b, e));
    if let Some(dl) = up.d_logits {
        let d_alpha: f64 = dl.data().iter().zip(fwd.sim.data()).map(|(g, s)| g * s).sum();
        grad.log_alpha += alpha * d_alpha;
        grad.beta += dl.sum();
        d_img.add_assign_scaled(&dl.matmul(&fwd.txt.embed)?, alpha);
        d_txt.add_assign_scaled(&dl.t_matmul(&fwd.img.embed)?, alpha);
    }
    student
        .image
        .backward(batch.image(), &fwd.img, &d_img, &mut grad.image)?;
    student
        .text
        .backward(batch.text(), &fwd.txt, &d_txt, &mut grad.text)?;
    Ok(())
}

fn evaluate(
    student: &ModelParams,
    spec: &LossSpec<'_>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelParams>)> {
    ensure!(
        spec.lambda.is_finite() && spec.lambda >= 0.0,
        "lambda must be finite and non-negative, got {}",
        spec.lambda
    );
    let use_kd = spec.lambda > 0.0;
    if use_kd {
        ensure!(!spec.kd.teachers.is_empty(), "lambda > 0 requires at least one teacher");
        spec.kd.weights.validate()?;
    }

    let ce = forward(student, spec.batch_ce)?;
    let per_example = per_example_losses(&ce.logits, spec.kind);
    let contrastive = per_example.iter().sum::<f64>() / per_example.len() as f64;
    let mut components = BTreeMap::new();
    components.insert("contrastive".to_string(), contrastive);
    components.insert("kd".to_string(), 0.0);

    let mut grad = want_grad.then(|| student.zeros_like());
    if let Some(g) = grad.as_mut() {
        let up = Upstream {
            d_logits: Some(contrastive_logit_grad(&ce.logits, spec.kind)),
            d_img: None,
            d_txt: None,
        };
        backward(student, spec.batch_ce, &ce, up, g)?;
    }

    if !use_kd {
        let total = contrastive;
        return Ok((
            LossBreakdown {
                total,
                per_example,
                components,
            },
            grad,
        ));
    }

    let batch = spec.batch_kd;
    let w = spec.kd.weights;
    let kd_fwd = forward(student, batch)?;
    let teacher_fwd = spec
        .kd
        .teachers
        .iter()
        .map(|t| forward(t, batch))
        .collect::<Result<Vec<_>>>()?;
    if teacher_fwd.iter().any(|t| t.logits.shape() != kd_fwd.logits.shape()) {
        return Err(Error::invalid("teacher and student KD batches differ in size"));
    }
    let teacher_logits: Vec<Matrix> = teacher_fwd.iter().map(|t| t.logits.clone()).collect();

    let mut kd = 0.0;
    let mut d_logits = Matrix::zeros(kd_fwd.logits.rows(), kd_fwd.logits.cols());
    if w.softmax > 0.0 {
        let targets = SoftmaxTargets::from_teachers(&teacher_logits);
        let (l, g) = softmax_kd_with_grad(&targets, &kd_fwd.logits);
        components.insert("kd_softmax".to_string(), l);
        kd += w.softmax * l;
        d_logits.add_assign_scaled(&g, spec.lambda * w.softmax);
    }
    if w.sigmoid > 0.0 {
        let targets = sigmoid_targets(&teacher_logits);
        let (l, g) = sigmoid_kd_with_grad(&targets, &kd_fwd.logits);
        components.insert("kd_sigmoid".to_string(), l);
        kd += w.sigmoid * l;
        d_logits.add_assign_scaled(&g, spec.lambda * w.sigmoid);
    }
    let (b, e) = (kd_fwd.img.embed.rows(), kd_fwd.img.embed.cols());
    let mut d_img = Matrix::zeros(b, e);
    let mut d_txt = Matrix::zeros(b, e);
    if w.feature_match > 0.0 {
        // Ensemble feature matching averages the per-teacher losses.
        let k = teacher_fwd.len() as f64;
        let mut fm = 0.0;
        for t in &teacher_fwd {
            let r = feature_match_with_grad(
                &kd_fwd.img.embed,
                &kd_fwd.txt.embed,
                &t.img.embed,
                &t.txt.embed,
                student.projection.as_ref(),
            )?;
            fm += r.loss / k;
            let s = spec.lambda * w.feature_match / k;
            d_img.add_assign_scaled(&r.d_img, s);
            d_txt.add_assign_scaled(&r.d_txt, s);
            if let (Some(g), Some(dp)) = (grad.as_mut(), r.d_projection) {
                g.projection
                    .as_mut()
                    .expect("student has a projection head")
                    .add_assign_scaled(&dp, s);
            }
        }
        components.insert("kd_feature_match".to_string(), fm);
        kd += w.feature_match * fm;
    }
    if let Some(g) = grad.as_mut() {
        let up = Upstream {
            d_logits: Some(d_logits),
            d_img: Some(d_img),
            d_txt: Some(d_txt),
        };
        backward(student, batch, &kd_fwd, up, g)?;
    }

    components.insert("kd".to_string(), kd);
    let total = contrastive + spec.lambda * kd;
    Ok((
        LossBreakdown {
            total,
            per_example,
            components,
        },
        grad,
    ))
}
