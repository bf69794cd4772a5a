use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup, `peak·sqrt(warmup/step)` body, linear cooldown to zero.
    Rsqrt,
    /// Linear warmup, then half-cosine decay to zero. No separate cooldown.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub cooldown_fraction: f64,
    /// `0` means "derive from the training budget".
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Rsqrt,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            cooldown_fraction: 0.1,
            total_steps: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.peak_lr.is_finite() && self.peak_lr > 0.0,
            "peak_lr must be positive, got {}",
            self.peak_lr
        );
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("cooldown_fraction", self.cooldown_fraction),
        ] {
            ensure!((0.0..=1.0).contains(&v), "{name} must lie in [0, 1], got {v}");
        }
        ensure!(
            self.warmup_fraction + self.cooldown_fraction <= 1.0 + 1e-12,
            "warmup and cooldown fractions sum past 1"
        );
        ensure!(self.total_steps >= 1, "schedule needs total_steps ≥ 1");
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn cooldown_steps(&self) -> usize {
        match self.kind {
            ScheduleKind::Rsqrt => {
                let c = (self.cooldown_fraction * self.total_steps as f64).round() as usize;
                c.min(self.total_steps - self.warmup_steps())
            }
            ScheduleKind::Cosine => 0,
        }
    }
}

/// Learning rate at `step ∈ [0, total_steps]`; update number `t` (1-based) uses `learning_rate(t)`.
pub fn learning_rate(schedule: &ScheduleConfig, step: usize) -> Result<f64> {
    schedule.validate()?;
    let total = schedule.total_steps;
    ensure!(step <= total, "step {step} outside [0, {total}]");
    let peak = schedule.peak_lr;
    let warmup = schedule.warmup_steps();
    if step == 0 {
        return Ok(0.0);
    }
    if step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    Ok(match schedule.kind {
        ScheduleKind::Rsqrt => {
            let anchor = warmup.max(1) as f64;
            let body = |s: usize| peak * (anchor / (s as f64).max(anchor)).sqrt();
            let start = total - schedule.cooldown_steps();
            if step <= start {
                body(step)
            } else {
                body(start) * (total - step) as f64 / (total - start) as f64
            }
        }
        ScheduleKind::Cosine => {
            let progress = (step - warmup) as f64 / (total - warmup) as f64;
            peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rsqrt(total: usize) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: total,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn rsqrt_examples() {
        let s = rsqrt(1000);
        assert_eq!(s.warmup_steps(), 100);
        assert_eq!(learning_rate(&s, 0).unwrap(), 0.0);
        assert!((learning_rate(&s, 100).unwrap() - 0.001).abs() < 1e-15);
        assert!((learning_rate(&s, 400).unwrap() - 0.0005).abs() < 1e-15);
        assert!((learning_rate(&s, 50).unwrap() - 0.0005).abs() < 1e-15);
        assert_eq!(learning_rate(&s, 1000).unwrap(), 0.0);
        assert!(learning_rate(&s, 1001).is_err());
    }

    #[test]
    fn cosine_examples() {
        let s = ScheduleConfig {
            kind: ScheduleKind::Cosine,
            ..rsqrt(110)
        };
        assert_eq!(s.warmup_steps(), 11);
        assert!((learning_rate(&s, 11).unwrap() - 1e-3).abs() < 1e-15);
        let mid = 11 + 99 / 2;
        let expect = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 49.0 / 99.0).cos());
        assert!((learning_rate(&s, mid).unwrap() - expect).abs() < 1e-15);
        assert!(learning_rate(&s, 110).unwrap().abs() < 1e-18);
    }

    #[test]
    fn invalid_schedules() {
        for bad in [
            ScheduleConfig { peak_lr: 0.0, ..rsqrt(10) },
            ScheduleConfig { warmup_fraction: 0.7, cooldown_fraction: 0.4, ..rsqrt(10) },
            rsqrt(0),
        ] {
            assert!(learning_rate(&bad, 0).is_err());
        }
    }

    proptest! {
        #[test]
        fn continuous_and_peaked(
            total in 10usize..400,
            warm in 0.01f64..0.4,
            cool in 0.0f64..0.5,
            cosine in any::<bool>(),
        ) {
            let s = ScheduleConfig {
                kind: if cosine { ScheduleKind::Cosine } else { ScheduleKind::Rsqrt },
                peak_lr: 1e-3,
                warmup_fraction: warm,
                cooldown_fraction: cool,
                total_steps: total,
            };
            prop_assume!(s.warmup_steps() >= 1);
            let lrs: Vec<f64> = (0..=total).map(|t| learning_rate(&s, t).unwrap()).collect();
            let max = lrs.iter().copied().fold(0.0, f64::max);
            prop_assert!((max - 1e-3).abs() < 1e-15);
            prop_assert!(lrs.iter().all(|&v| (0.0..=1e-3 + 1e-15).contains(&v)));
            // Boundary continuity: the analytic expressions on either side agree.
            let w = s.warmup_steps();
            prop_assert!((lrs[w] - 1e-3).abs() < 1e-12);
            if !cosine {
                let start = total - s.cooldown_steps();
                let body = 1e-3 * (w as f64 / start as f64).sqrt();
                prop_assert!((lrs[start] - body).abs() < 1e-12);
            }
        }
    }
}
