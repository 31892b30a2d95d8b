//! Ranking and calibration metrics with stratified bootstrap intervals.
//!
//! Metrics take parallel slices of scores and labels (`true` = high
//! complexity). Scores are probabilities, so everything here is `f64`.

mod bootstrap;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{percentile, stratified_bootstrap_ci, stratified_bootstrap_replicates, BootstrapCI};
pub use report::{
    evaluate, evaluate_partition, read_predictions, write_predictions, EvaluationConfig, MetricReport, PredictionRow,
    ScoredSet, SensitivityReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("partition '{tag}' matches no cases")]
    EmptyPartition { tag: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("predictions line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(EvalError::Argument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

fn require_both(pos: u64, neg: u64) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedMetric(format!("needs both classes, got {pos} positive and {neg} negative")));
    }
    Ok(())
}

/// (score, positives, negatives) per distinct score, descending.
fn groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let (p, n) = if labels[i] { (1, 0) } else { (0, 1) };
        match out.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => out.push((scores[i], p, n)),
        }
    }
    out
}

/// Mann–Whitney statistic with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    // twice the concordant count, accumulated from the lowest score up
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    for &(_, p, n) in groups(scores, labels).iter().rev() {
        twice += p as u128 * (2 * neg_below + n as u128);
        neg_below += n as u128;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision; tied scores form a single step.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::UndefinedMetric("no positive cases".into()));
    }
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for (_, p, n) in groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

impl CurvePoints {
    pub fn to_csv(&self, x: &str, y: &str, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("threshold,{x},{y}\n"));
        for (&(a, b), t) in self.points.iter().zip(&self.thresholds) {
            out.push_str(&format!("{t},{a},{b}\n"));
        }
        out
    }
}

/// (false positive rate, true positive rate) per distinct threshold,
/// starting at (0,0) with threshold +inf and ending at (1,1).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<CurvePoints> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, p, n) in groups(scores, labels) {
        tp += p;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    Ok(CurvePoints { points, thresholds })
}

/// (recall, precision) per distinct threshold, highest threshold first.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<CurvePoints> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::UndefinedMetric("no positive cases".into()));
    }
    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, p, n) in groups(scores, labels) {
        tp += p;
        fp += n;
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
        thresholds.push(s);
    }
    Ok(CurvePoints { points, thresholds })
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Σ (r_i − r_{i−1}) · p_i with r_0 = 0.
pub fn step_area(points: &[(f64, f64)]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for &(r, p) in points {
        area += (r - prev) * p;
        prev = r;
    }
    area
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Highest threshold whose sensitivity (score ≥ threshold counts as
/// positive) reaches `target`.
pub fn specificity_at_sensitivity(scores: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(EvalError::Argument(format!("target sensitivity {target} not in (0, 1]")));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, p, n) in groups(scores, labels) {
        tp += p;
        fp += n;
        let sensitivity = tp as f64 / pos as f64;
        if sensitivity >= target {
            return Ok(OperatingPoint { threshold: s, sensitivity, specificity: (neg - fp) as f64 / neg as f64 });
        }
    }
    unreachable!("sensitivity reaches 1 at the lowest threshold")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    pub empirical_frequency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

impl CalibrationReport {
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("lower,upper,count,mean_confidence,empirical_frequency\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.lower,
                b.upper,
                b.count,
                opt(b.mean_confidence),
                opt(b.empirical_frequency)
            ));
        }
        out
    }
}

/// Equal-width bins over [0,1]; the last bin is closed on the right.
pub fn calibration(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    class_counts(scores, labels)?;
    if n_bins == 0 {
        return Err(EvalError::Argument("n_bins must be >= 1".into()));
    }
    let mut count = vec![0u64; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0u64; n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += s;
        hits[b] += l as u64;
    }
    let total = scores.len() as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, empirical_frequency) = if count[b] == 0 {
                (None, None)
            } else {
                let c = count[b] as f64;
                let (m, f) = (conf[b] / c, hits[b] as f64 / c);
                ece += c / total * (f - m).abs();
                (Some(m), Some(f))
            };
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                empirical_frequency,
            }
        })
        .collect();
    Ok(CalibrationReport { bins, ece })
}

pub fn ece(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<f64> {
    Ok(calibration(scores, labels, n_bins)?.ece)
}
