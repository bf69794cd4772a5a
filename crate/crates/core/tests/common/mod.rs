//! Helpers shared by the integration tests.
#![allow(dead_code)]

use curation_core::model::{ModelParams, ModelShape, PairBatch};
use curation_core::numerics::{Matrix, RngStream};
use curation_core::objectives::{gradient, unified_loss, ContrastiveKind, LossSpec};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut g = RngStream::with_stream(seed, 901).generator();
    Matrix::from_fn(rows, cols, |_, _| g.sample::<f64, _>(StandardNormal))
}

pub fn random_batch(b: usize, d_img: usize, d_txt: usize, seed: u64) -> PairBatch {
    PairBatch::new(random_matrix(b, d_img, seed), random_matrix(b, d_txt, seed + 1_000_000)).unwrap()
}

pub fn random_model(shape: &ModelShape, kind: ContrastiveKind, seed: u64) -> ModelParams {
    let mut m = ModelParams::init(shape, kind, RngStream::new(seed)).unwrap();
    // Move the scale off its init value so the temperature gradient is generic.
    m.log_alpha += 0.3;
    m.beta += 0.1;
    m
}

/// Worst mismatch between the analytic gradient and a fourth-order central
/// difference, as `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Debug)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_group: &'static str,
    pub checked: usize,
}

pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn check_gradient(student: &ModelParams, spec: &LossSpec<'_>) -> GradientCheck {
    let (_, analytic) = gradient(student, spec).unwrap();
    let h = 1e-3;
    let mut probe = student.clone();
    let mut result = GradientCheck {
        max_relative_error: 0.0,
        worst_group: "",
        checked: 0,
    };
    let analytic_groups: Vec<(&'static str, Vec<f64>)> =
        analytic.groups().into_iter().map(|(n, v)| (n, v.to_vec())).collect();
    for (g, (name, grads)) in analytic_groups.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let base = probe.groups()[g].1[k];
            let mut at = |delta: f64| {
                probe.groups_mut()[g].1[k] = base + delta;
                unified_loss(&probe, spec).unwrap().total
            };
            let numeric =
                (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe.groups_mut()[g].1[k] = base;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if err > result.max_relative_error {
                result.max_relative_error = err;
                result.worst_group = name;
            }
            result.checked += 1;
        }
    }
    result
}

pub fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}
