//! Choosing a low-variance subset of evaluations.
//!
//! Each evaluation's variability is the across-seed standard deviation of its
//! score, averaged over methods. Evaluations are added from least to most
//! variable while the standard deviation of their mean,
//! `sqrt(Σ s_i²) / N`, stays below the variability of the single most stable
//! evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{mean, sample_std};

/// One score of one method on one evaluation under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub evaluation: String,
    pub method: String,
    pub seed: u64,
    pub score: f64,
}

/// Scores indexed by evaluation, then method, then seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    scores: BTreeMap<String, BTreeMap<String, BTreeMap<u64, f64>>>,
}

impl EvalTable {
    /// Requires at least two seeds per (evaluation, method), the same method
    /// set for every evaluation, and no duplicate cells.
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        ensure!(!records.is_empty(), "evaluation table is empty");
        let mut scores: BTreeMap<String, BTreeMap<String, BTreeMap<u64, f64>>> = BTreeMap::new();
        for r in records {
            ensure!(r.score.is_finite(), "non-finite score for {}/{}", r.evaluation, r.method);
            let previous = scores
                .entry(r.evaluation.clone())
                .or_default()
                .entry(r.method.clone())
                .or_default()
                .insert(r.seed, r.score);
            ensure!(
                previous.is_none(),
                "duplicate score for evaluation {}, method {}, seed {}",
                r.evaluation,
                r.method,
                r.seed
            );
        }
        let methods: BTreeSet<&String> = scores.values().next().expect("non-empty").keys().collect();
        for (eval, by_method) in &scores {
            ensure!(
                by_method.keys().collect::<BTreeSet<_>>() == methods,
                "evaluation {eval} does not cover the same methods as the others"
            );
            for (method, seeds) in by_method {
                ensure!(
                    seeds.len() >= 2,
                    "evaluation {eval}, method {method} has {} seed(s); need at least 2",
                    seeds.len()
                );
            }
        }
        Ok(Self { scores })
    }

    pub fn evaluations(&self) -> Vec<&str> {
        self.scores.keys().map(String::as_str).collect()
    }
}

/// Mean over methods of the across-seed sample standard deviation, per evaluation.
pub fn per_eval_variability(table: &EvalTable) -> Vec<(String, f64)> {
    table
        .scores
        .iter()
        .map(|(eval, by_method)| {
            let stds: Vec<f64> = by_method
                .values()
                .map(|seeds| sample_std(&seeds.values().copied().collect::<Vec<_>>()))
                .collect();
            (eval.clone(), mean(&stds))
        })
        .collect()
}

/// Standard deviation of the mean of `N` independent evaluations with the given stds.
pub fn subset_variability(stds: &[f64]) -> Result<f64> {
    ensure!(!stds.is_empty(), "subset must contain at least one evaluation");
    let n = stds.len() as f64;
    Ok((stds.iter().map(|s| s * s).sum::<f64>() / (n * n)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableSubset {
    /// Every evaluation in ascending variability (ties by name).
    pub order: Vec<(String, f64)>,
    /// Variability of the most stable single evaluation.
    pub threshold: f64,
    /// `subset_variability` of each prefix of `order`, for prefix lengths 1..=N.
    pub prefix_variability: Vec<f64>,
    /// Number of evaluations kept.
    pub selected_len: usize,
    pub selected: Vec<String>,
}

/// Longest ascending prefix whose subset variability stays below the most
/// stable single evaluation; growth stops at the first prefix that does not.
pub fn select_stable_subset(variabilities: &[(String, f64)]) -> Result<StableSubset> {
    ensure!(!variabilities.is_empty(), "no evaluations to select from");
    ensure!(
        variabilities.iter().all(|(_, v)| v.is_finite() && *v >= 0.0),
        "variabilities must be finite and non-negative"
    );
    let mut order = variabilities.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let threshold = order[0].1;
    let stds: Vec<f64> = order.iter().map(|(_, v)| *v).collect();
    let prefix_variability = (1..=stds.len())
        .map(|n| subset_variability(&stds[..n]))
        .collect::<Result<Vec<_>>>()?;
    let mut selected_len = 1;
    while selected_len < stds.len() && prefix_variability[selected_len] < threshold {
        selected_len += 1;
    }
    Ok(StableSubset {
        selected: order[..selected_len].iter().map(|(n, _)| n.clone()).collect(),
        order,
        threshold,
        prefix_variability,
        selected_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(v: &[f64]) -> Vec<(String, f64)> {
        v.iter().enumerate().map(|(i, &x)| (format!("e{i:02}"), x)).collect()
    }

    fn rec(e: &str, m: &str, seed: u64, score: f64) -> EvalRecord {
        EvalRecord {
            evaluation: e.into(),
            method: m.into(),
            seed,
            score,
        }
    }

    #[test]
    fn two_seed_std() {
        let t = EvalTable::from_records(&[rec("a", "m", 0, 1.0), rec("a", "m", 1, 3.0)]).unwrap();
        let v = per_eval_variability(&t);
        assert!((v[0].1 - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn equal_variance_collapse() {
        for n in 1..10 {
            let s = subset_variability(&vec![0.3; n]).unwrap();
            assert!((s - 0.3 / (n as f64).sqrt()).abs() < 1e-15);
        }
        let all = select_stable_subset(&named(&[0.2; 5])).unwrap();
        assert_eq!(all.selected_len, 5);
    }

    #[test]
    fn outlier_is_excluded() {
        let mut v = vec![0.1; 9];
        v.push(10.0);
        let s = select_stable_subset(&named(&v)).unwrap();
        assert_eq!(s.selected_len, 9);
        assert!(!s.selected.contains(&"e09".to_string()));
        assert_eq!(s.threshold, 0.1);
    }

    #[test]
    fn ties_break_by_name() {
        let v = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.1)];
        let s = select_stable_subset(&v).unwrap();
        let names: Vec<&str> = s.order.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["c", "a", "b"]);
    }

    #[test]
    fn table_validation() {
        assert!(EvalTable::from_records(&[rec("a", "m", 0, 1.0)]).is_err());
        assert!(EvalTable::from_records(&[
            rec("a", "m", 0, 1.0),
            rec("a", "m", 0, 2.0),
        ])
        .is_err());
        assert!(EvalTable::from_records(&[
            rec("a", "m", 0, 1.0),
            rec("a", "m", 1, 2.0),
            rec("b", "n", 0, 1.0),
            rec("b", "n", 1, 2.0),
        ])
        .is_err());
    }

    #[test]
    fn selected_prefix_respects_threshold() {
        let s = select_stable_subset(&named(&[0.15, 0.2, 0.25, 0.4, 0.9, 2.0])).unwrap();
        for n in 2..=s.selected_len {
            assert!(s.prefix_variability[n - 1] < s.threshold);
        }
        if s.selected_len < 6 {
            assert!(s.prefix_variability[s.selected_len] >= s.threshold);
        }
    }
}
