use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled: each step subtracts `lr · weight_decay · p` from every parameter.
    pub weight_decay: f64,
    /// Maximum global gradient norm.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.epsilon > 0.0, "epsilon must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.clip_norm > 0.0, "clip_norm must be positive");
        Ok(())
    }
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .groups()
        .iter()
        .flat_map(|(_, v)| v.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Gradient norms before and after clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One AdamW update with global-norm clipping, applied in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    config: &OptimizerConfig,
) -> Result<UpdateStats> {
    config.validate()?;
    ensure!(lr.is_finite() && lr >= 0.0, "learning rate must be finite and non-negative");
    ensure!(
        grads.shape() == params.shape() && state.first_moment.shape() == params.shape(),
        "gradient/optimizer shapes do not match the parameters"
    );
    let next_step = state.step + 1;
    for (name, g) in grads.groups() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: next_step,
                group: name.to_string(),
            });
        }
    }
    let grad_norm = global_norm(grads);
    let scale = if grad_norm > config.clip_norm {
        config.clip_norm / grad_norm
    } else {
        1.0
    };
    let t = next_step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    let mut clipped_sq = 0.0;
    let groups = params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(state.first_moment.groups_mut())
        .zip(state.second_moment.groups_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in groups {
        for i in 0..p.len() {
            let gi = g[i] * scale;
            clipped_sq += gi * gi;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon);
            p[i] -= lr * (update + config.weight_decay * p[i]);
        }
    }
    state.step = next_step;
    Ok(UpdateStats {
        grad_norm,
        clipped_norm: clipped_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use crate::numerics::RngStream;
    use crate::objectives::ContrastiveKind;

    fn params() -> ModelParams {
        ModelParams::init(&ModelShape::symmetric(3, 2, 4, 2), ContrastiveKind::Softmax, RngStream::new(3))
            .unwrap()
    }

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        optimizer_step(&mut p, &before.zeros_like(), &mut state, 1e-3, &no_decay()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.first_moment, before.zeros_like());
        assert_eq!(state.second_moment, before.zeros_like());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.beta = 1.0;
        let mut state = OptimizerState::new(&p);
        optimizer_step(&mut p, &g, &mut state, 1e-3, &no_decay()).unwrap();
        assert!((p.beta - before.beta + 1e-3).abs() < 1e-11);
        assert_eq!(p.log_alpha, before.log_alpha);
    }

    #[test]
    fn clipping_halves_gradient() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.beta = 2.0;
        let mut state = OptimizerState::new(&p);
        let stats = optimizer_step(&mut p, &g, &mut state, 1e-3, &no_decay()).unwrap();
        assert_eq!(stats.grad_norm, 2.0);
        assert!((stats.clipped_norm - 1.0).abs() < 1e-15);
        assert!((state.first_moment.beta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = params();
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        optimizer_step(&mut p, &before.zeros_like(), &mut state, 0.1, &cfg).unwrap();
        assert!((p.log_alpha - before.log_alpha * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.text.output.bias[1] = f64::NAN;
        let mut state = OptimizerState::new(&p);
        state.step = 6;
        match optimizer_step(&mut p, &g, &mut state, 1e-3, &no_decay()) {
            Err(Error::NonFiniteGradient { step, group }) => {
                assert_eq!(step, 7);
                assert_eq!(group, "text.output.bias");
            }
            other => panic!("{other:?}"),
        }
    }
}
