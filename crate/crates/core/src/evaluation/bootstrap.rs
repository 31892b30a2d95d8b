use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_counts, EvalError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub seed: u64,
}

/// Linear interpolation between order statistics of sorted `values`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Metric value on each replicate, in replicate order. Replicate `r`
/// resamples positives and negatives separately with replacement, using
/// stream `r` of `seed`.
pub fn stratified_bootstrap_replicates<F>(
    metric: F,
    scores: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[bool]) -> Result<f64> + Sync,
{
    class_counts(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut resampled_labels = vec![true; pos.len()];
    resampled_labels.resize(scores.len(), false);
    let one = |r: usize| -> Result<f64> {
        let mut g = rng::stream(seed, r as u64);
        let mut s = Vec::with_capacity(scores.len());
        for _ in 0..pos.len() {
            s.push(pos[g.random_range(0..pos.len())]);
        }
        for _ in 0..neg.len() {
            s.push(neg[g.random_range(0..neg.len())]);
        }
        let v = metric(&s, &resampled_labels)?;
        if !v.is_finite() {
            return Err(EvalError::UndefinedMetric(format!("replicate {r} gave {v}")));
        }
        Ok(v)
    };
    if parallel {
        (0..replicates).into_par_iter().map(one).collect()
    } else {
        (0..replicates).map(one).collect()
    }
}

/// 95% percentile interval of the stratified bootstrap distribution.
pub fn stratified_bootstrap_ci<F>(metric: F, scores: &[f64], labels: &[bool], replicates: usize, seed: u64) -> Result<BootstrapCI>
where
    F: Fn(&[f64], &[bool]) -> Result<f64> + Sync,
{
    if replicates == 0 {
        return Err(EvalError::Argument("bootstrap needs at least one replicate".into()));
    }
    let point_estimate = metric(scores, labels)?;
    let mut values = stratified_bootstrap_replicates(&metric, scores, labels, replicates, seed, true)?;
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCI {
        point_estimate,
        lower: percentile(&values, 0.025),
        upper: percentile(&values, 0.975),
        replicates,
        seed,
    })
}
