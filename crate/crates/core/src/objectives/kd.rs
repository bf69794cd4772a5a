//! Teacher→student distillation losses on logit matrices and embeddings.

use crate::error::{ensure, Result};
use crate::numerics::{log_sigmoid_unchecked, sigmoid, Matrix};

use super::{col_log_softmax, ensure_square, row_log_softmax};

/// Softmax targets of one or more teachers, averaged over the ensemble.
pub(crate) struct SoftmaxTargets {
    pub rows: Matrix,
    pub cols: Matrix,
}

impl SoftmaxTargets {
    pub fn from_teachers(teacher_logits: &[Matrix]) -> Self {
        let (b, _) = teacher_logits[0].shape();
        let mut rows = Matrix::zeros(b, b);
        let mut cols = Matrix::zeros(b, b);
        let w = 1.0 / teacher_logits.len() as f64;
        for t in teacher_logits {
            rows.add_assign_scaled(&row_log_softmax(t).map(f64::exp), w);
            cols.add_assign_scaled(&col_log_softmax(t).map(f64::exp), w);
        }
        Self { rows, cols }
    }
}

/// Averaged `σ(T_ij)` over the ensemble.
pub(crate) fn sigmoid_targets(teacher_logits: &[Matrix]) -> Matrix {
    let (b, _) = teacher_logits[0].shape();
    let mut out = Matrix::zeros(b, b);
    let w = 1.0 / teacher_logits.len() as f64;
    for t in teacher_logits {
        out.add_assign_scaled(&t.map(sigmoid), w);
    }
    out
}

/// Cross-entropy of student row/column softmaxes against targets, `1/(2b)`
/// normalized, with its gradient w.r.t. the student logits.
pub(crate) fn softmax_kd_with_grad(targets: &SoftmaxTargets, student: &Matrix) -> (f64, Matrix) {
    let b = student.rows();
    let scale = 1.0 / (2.0 * b as f64);
    let q_rows = row_log_softmax(student);
    let q_cols = col_log_softmax(student);
    let mut loss = 0.0;
    for i in 0..b {
        for j in 0..b {
            loss -= targets.rows[(i, j)] * q_rows[(i, j)] + targets.cols[(i, j)] * q_cols[(i, j)];
        }
    }
    let grad = Matrix::from_fn(b, b, |i, j| {
        scale
            * ((q_rows[(i, j)].exp() - targets.rows[(i, j)])
                + (q_cols[(i, j)].exp() - targets.cols[(i, j)]))
    });
    (scale * loss, grad)
}

/// Binary cross-entropy of `σ(S)` against target probabilities, `1/b`
/// normalized, with its gradient w.r.t. the student logits.
pub(crate) fn sigmoid_kd_with_grad(targets: &Matrix, student: &Matrix) -> (f64, Matrix) {
    let b = student.rows();
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    for (&p, &s) in targets.data().iter().zip(student.data()) {
        loss -= p * log_sigmoid_unchecked(s) + (1.0 - p) * log_sigmoid_unchecked(-s);
    }
    let grad = Matrix::from_fn(b, b, |i, j| {
        scale * (sigmoid(student[(i, j)]) - targets[(i, j)])
    });
    (scale * loss, grad)
}

pub(crate) struct FeatureMatchGrad {
    pub loss: f64,
    pub d_img: Matrix,
    pub d_txt: Matrix,
    pub d_projection: Option<Matrix>,
}

pub(crate) fn feature_match_with_grad(
    student_img: &Matrix,
    student_txt: &Matrix,
    teacher_img: &Matrix,
    teacher_txt: &Matrix,
    projection: Option<&Matrix>,
) -> Result<FeatureMatchGrad> {
    ensure!(
        student_img.rows() == teacher_img.rows()
            && student_txt.rows() == teacher_txt.rows()
            && student_img.rows() == student_txt.rows(),
        "feature matching needs equal row counts"
    );
    let projected_dim = projection.map_or(student_img.cols(), Matrix::cols);
    ensure!(
        projected_dim == teacher_img.cols() && projected_dim == teacher_txt.cols(),
        "student embedding width {} does not match teacher width {}{}",
        projected_dim,
        teacher_img.cols(),
        if projection.is_none() { " (no projection head)" } else { "" }
    );
    if let Some(p) = projection {
        ensure!(
            p.rows() == student_img.cols(),
            "projection expects width {}, student has {}",
            p.rows(),
            student_img.cols()
        );
    }
    let b = student_img.rows() as f64;
    let project = |z: &Matrix| match projection {
        Some(p) => z.matmul(p),
        None => Ok(z.clone()),
    };
    let mut residual_img = project(student_img)?;
    residual_img.add_assign_scaled(teacher_img, -1.0);
    let mut residual_txt = project(student_txt)?;
    residual_txt.add_assign_scaled(teacher_txt, -1.0);
    let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
    let loss = (sq(&residual_img) + sq(&residual_txt)) / (2.0 * b);

    // ∂/∂ẑ = (ẑ − z_t)/b
    residual_img.scale(1.0 / b);
    residual_txt.scale(1.0 / b);
    let (d_img, d_txt, d_projection) = match projection {
        Some(p) => {
            let mut dp = student_img.t_matmul(&residual_img)?;
            dp.add_assign_scaled(&student_txt.t_matmul(&residual_txt)?, 1.0);
            (
                residual_img.matmul_t(p)?,
                residual_txt.matmul_t(p)?,
                Some(dp),
            )
        }
        None => (residual_img, residual_txt, None),
    };
    Ok(FeatureMatchGrad {
        loss,
        d_img,
        d_txt,
        d_projection,
    })
}

fn ensure_pair(teacher: &Matrix, student: &Matrix) -> Result<()> {
    ensure_square(teacher, "teacher logits")?;
    ensure_square(student, "student logits")?;
    ensure!(
        teacher.shape() == student.shape(),
        "teacher logits {:?} and student logits {:?} differ",
        teacher.shape(),
        student.shape()
    );
    Ok(())
}

/// `−1/(2b) Σ_ij [p^{i→t}_ij log q^{i→t}_ij + p^{t→i}_ij log q^{t→i}_ij]`.
pub fn kd_softmax(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<f64> {
    ensure_pair(teacher_logits, student_logits)?;
    let targets = SoftmaxTargets::from_teachers(std::slice::from_ref(teacher_logits));
    Ok(softmax_kd_with_grad(&targets, student_logits).0)
}

/// `−1/b Σ_ij [σ(T) log σ(S) + σ(−T) log σ(−S)]`; both matrices carry their own α, β.
pub fn kd_sigmoid(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<f64> {
    ensure_pair(teacher_logits, student_logits)?;
    let targets = sigmoid_targets(std::slice::from_ref(teacher_logits));
    Ok(sigmoid_kd_with_grad(&targets, student_logits).0)
}

/// `1/(2b) Σ_i ‖ẑ_img − z_img,t‖² + ‖ẑ_txt − z_txt,t‖²` with `ẑ = z·P` when a head is given.
pub fn kd_feature_match(
    student_img: &Matrix,
    student_txt: &Matrix,
    teacher_img: &Matrix,
    teacher_txt: &Matrix,
    projection: Option<&Matrix>,
) -> Result<f64> {
    Ok(feature_match_with_grad(student_img, student_txt, teacher_img, teacher_txt, projection)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::numerics::{unit_normalize, RngStream};
    use crate::objectives::{pairwise_probabilities, ProbabilityMode};

    const LN2: f64 = std::f64::consts::LN_2;

    fn gaussian(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
        let mut g = RngStream::new(seed).generator();
        Matrix::from_fn(rows, cols, |_, _| scale * g.sample::<f64, _>(StandardNormal))
    }

    fn hard_diagonal(b: usize) -> Matrix {
        Matrix::from_fn(b, b, |i, j| if i == j { 100.0 } else { -100.0 })
    }

    #[test]
    fn softmax_kd_examples() {
        let hard = hard_diagonal(3);
        assert_abs_diff_eq!(kd_softmax(&hard, &hard).unwrap(), 0.0, epsilon = 1e-12);
        let z = Matrix::zeros(2, 2);
        assert_abs_diff_eq!(kd_softmax(&z, &z).unwrap(), LN2, epsilon = 1e-15);
        assert!(kd_softmax(&z, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn softmax_kd_matches_triple_loop() {
        let t = gaussian(3, 3, 1, 3.0);
        let s = gaussian(3, 3, 2, 3.0);
        let b = 3;
        let mut acc = 0.0;
        for i in 0..b {
            for j in 0..b {
                let pr = t[(i, j)].exp() / (0..b).map(|k| t[(i, k)].exp()).sum::<f64>();
                let qr = s[(i, j)].exp() / (0..b).map(|k| s[(i, k)].exp()).sum::<f64>();
                let pc = t[(i, j)].exp() / (0..b).map(|k| t[(k, j)].exp()).sum::<f64>();
                let qc = s[(i, j)].exp() / (0..b).map(|k| s[(k, j)].exp()).sum::<f64>();
                acc += pr * qr.ln() + pc * qc.ln();
            }
        }
        let expect = -acc / (2.0 * b as f64);
        assert_abs_diff_eq!(kd_softmax(&t, &s).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_kd_examples() {
        let z = Matrix::zeros(2, 2);
        assert_abs_diff_eq!(kd_sigmoid(&z, &z).unwrap(), 2.0 * LN2, epsilon = 1e-15);
        let hard = Matrix::from_fn(3, 3, |i, j| if i == j { 60.0 } else { -55.0 });
        assert_abs_diff_eq!(kd_sigmoid(&hard, &hard).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn sigmoid_kd_matches_loops() {
        let t = gaussian(3, 3, 3, 4.0);
        let s = gaussian(3, 3, 4, 4.0);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += sig(t[(i, j)]) * sig(s[(i, j)]).ln() + sig(-t[(i, j)]) * sig(-s[(i, j)]).ln();
            }
        }
        assert_abs_diff_eq!(kd_sigmoid(&t, &s).unwrap(), -acc / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_match_examples() {
        let zi = unit_normalize(&gaussian(3, 4, 5, 1.0)).unwrap();
        let zt = unit_normalize(&gaussian(3, 4, 6, 1.0)).unwrap();
        assert_eq!(kd_feature_match(&zi, &zt, &zi, &zt, None).unwrap(), 0.0);

        let e0 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e1 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(
            kd_feature_match(&e0, &e0, &e1, &e1, None).unwrap(),
            2.0,
            epsilon = 1e-15
        );

        let wide = gaussian(3, 5, 7, 1.0);
        assert!(kd_feature_match(&zi, &zt, &wide, &wide, None).is_err());
    }

    #[test]
    fn feature_match_matches_elementwise_sum() {
        let si = gaussian(4, 3, 8, 1.0);
        let st = gaussian(4, 3, 9, 1.0);
        let ti = gaussian(4, 5, 10, 1.0);
        let tt = gaussian(4, 5, 11, 1.0);
        let p = gaussian(3, 5, 12, 1.0);
        let mut acc = 0.0;
        for (s, t) in [(&si, &ti), (&st, &tt)] {
            for i in 0..4 {
                for j in 0..5 {
                    let proj: f64 = (0..3).map(|k| s[(i, k)] * p[(k, j)]).sum();
                    acc += (proj - t[(i, j)]).powi(2);
                }
            }
        }
        assert_abs_diff_eq!(
            kd_feature_match(&si, &st, &ti, &tt, Some(&p)).unwrap(),
            acc / 8.0,
            epsilon = 1e-12
        );
    }

    fn mean_entropy_floor(t: &Matrix) -> f64 {
        let b = t.rows();
        let pr = pairwise_probabilities(t, ProbabilityMode::ImageToText).unwrap();
        let pc = pairwise_probabilities(t, ProbabilityMode::TextToImage).unwrap();
        let h = |p: &Matrix| -> f64 {
            p.data().iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
        };
        (h(&pr) + h(&pc)) / (2.0 * b as f64)
    }

    proptest! {
        #[test]
        fn softmax_kd_floor_is_teacher_entropy(seed in 0u64..300, b in 1usize..6) {
            let t = gaussian(b, b, seed, 3.0);
            let s = gaussian(b, b, seed + 10_000, 3.0);
            let floor = mean_entropy_floor(&t);
            prop_assert!((kd_softmax(&t, &t).unwrap() - floor).abs() < 1e-12);
            prop_assert!(kd_softmax(&t, &s).unwrap() >= floor - 1e-12);
        }

        #[test]
        fn sigmoid_kd_nonnegative(seed in 0u64..300, b in 1usize..6) {
            let t = gaussian(b, b, seed, 5.0);
            let s = gaussian(b, b, seed + 7, 5.0);
            prop_assert!(kd_sigmoid(&t, &s).unwrap() >= 0.0);
        }
    }
}
