use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    auprc, auroc, calibration, ece, specificity_at_sensitivity, stratified_bootstrap_ci, BootstrapCI, CalibrationReport,
    EvalError, Result,
};
use crate::dataset::Label;

/// One line of a predictions file. `member_probs` holds the per-model
/// probabilities when the file came from an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub case_id: String,
    pub prob_high: f64,
    pub label: Label,
    pub tags: BTreeSet<String>,
    pub member_probs: Vec<f64>,
}

/// `case_id,prob_high,label,tags[,member_0,…]`, tags joined by `;`.
pub fn write_predictions(rows: &[PredictionRow], comments: &[String]) -> String {
    let n_members = rows.iter().map(|r| r.member_probs.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["case_id".to_string(), "prob_high".into(), "label".into(), "tags".into()];
    header.extend((0..n_members).map(|m| format!("member_{m}")));
    w.write_record(&header).unwrap();
    for r in rows {
        let mut rec = vec![
            r.case_id.clone(),
            r.prob_high.to_string(),
            r.label.as_str().to_string(),
            r.tags.iter().cloned().collect::<Vec<_>>().join(";"),
        ];
        rec.extend(r.member_probs.iter().map(|p| p.to_string()));
        rec.resize(header.len(), String::new());
        w.write_record(&rec).unwrap();
    }
    out.push_str(&String::from_utf8(w.into_inner().unwrap()).unwrap());
    out
}

/// Parses a predictions file; lines starting with `#` are skipped.
pub fn read_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_reader(text.as_bytes());
    let err = |line: u64, message: String| EvalError::Parse { line, message };
    let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let expected = ["case_id", "prob_high", "label", "tags"];
    if header.len() < 4 || header.iter().take(4).ne(expected) {
        return Err(err(1, format!("header must start with {}", expected.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let prob = |s: &str, field: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| err(line, format!("{field} '{s}' is not a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(line, format!("{field} {v} outside [0, 1]")));
            }
            Ok(v)
        };
        let case_id = rec[0].to_string();
        if case_id.is_empty() {
            return Err(err(line, "empty case_id".into()));
        }
        let prob_high = prob(&rec[1], "prob_high")?;
        let label = Label::parse(rec[2].trim()).ok_or_else(|| err(line, format!("label '{}' is not low/high", &rec[2])))?;
        let tags = rec[3].split(';').filter(|t| !t.is_empty()).map(str::to_string).collect();
        let member_probs = (4..rec.len())
            .filter(|&i| !rec[i].is_empty())
            .map(|i| prob(&rec[i], &header[i]))
            .collect::<Result<_>>()?;
        rows.push(PredictionRow { case_id, prob_high, label, tags, member_probs });
    }
    Ok(rows)
}

/// Parallel lists of case ids, scores, labels and tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub case_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub tags: Vec<BTreeSet<String>>,
}

impl ScoredSet {
    pub fn from_rows(rows: &[PredictionRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(EvalError::Argument("scored set is empty".into()));
        }
        Ok(Self {
            case_ids: rows.iter().map(|r| r.case_id.clone()).collect(),
            scores: rows.iter().map(|r| r.prob_high).collect(),
            labels: rows.iter().map(|r| r.label.is_high()).collect(),
            tags: rows.iter().map(|r| r.tags.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Cases carrying `tag`, in original order.
    pub fn filter_tag(&self, tag: &str) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.tags[i].contains(tag)).collect();
        Self {
            case_ids: keep.iter().map(|&i| self.case_ids[i].clone()).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            tags: keep.iter().map(|&i| self.tags[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub n_bins: usize,
    pub sensitivities: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { bootstrap_replicates: 10_000, seed: 0, n_bins: 10, sensitivities: vec![0.95, 0.98, 0.99] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub target: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: BootstrapCI,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_cases: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub auroc: BootstrapCI,
    pub auprc: BootstrapCI,
    pub ece: BootstrapCI,
    pub n_bins: usize,
    pub specificity_at_sensitivity: Vec<SensitivityReport>,
    pub calibration: CalibrationReport,
}

/// Every metric with its bootstrap interval. All intervals share the
/// same resamples (same seed).
pub fn evaluate(set: &ScoredSet, config: &EvaluationConfig) -> Result<MetricReport> {
    let (s, l) = (&set.scores[..], &set.labels[..]);
    let (r, seed) = (config.bootstrap_replicates, config.seed);
    let n_positive = l.iter().filter(|&&x| x).count();
    let bins = config.n_bins;
    let mut specificity = Vec::new();
    for &target in &config.sensitivities {
        let op = specificity_at_sensitivity(s, l, target)?;
        let ci = stratified_bootstrap_ci(
            |s: &[f64], l: &[bool]| Ok(specificity_at_sensitivity(s, l, target)?.specificity),
            s,
            l,
            r,
            seed,
        )?;
        specificity.push(SensitivityReport { target, threshold: op.threshold, sensitivity: op.sensitivity, specificity: ci });
    }
    Ok(MetricReport {
        n_cases: set.len(),
        n_positive,
        n_negative: set.len() - n_positive,
        auroc: stratified_bootstrap_ci(auroc, s, l, r, seed)?,
        auprc: stratified_bootstrap_ci(auprc, s, l, r, seed)?,
        ece: stratified_bootstrap_ci(|s: &[f64], l: &[bool]| ece(s, l, bins), s, l, r, seed)?,
        n_bins: bins,
        specificity_at_sensitivity: specificity,
        calibration: calibration(s, l, bins)?,
    })
}

/// `evaluate` on the cases carrying `tag`.
pub fn evaluate_partition(set: &ScoredSet, tag: &str, config: &EvaluationConfig) -> Result<MetricReport> {
    let subset = set.filter_tag(tag);
    if subset.is_empty() {
        return Err(EvalError::EmptyPartition { tag: tag.to_string() });
    }
    evaluate(&subset, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, p: f64, high: bool, tags: &[&str]) -> PredictionRow {
        PredictionRow {
            case_id: id.into(),
            prob_high: p,
            label: if high { Label::High } else { Label::Low },
            tags: tags.iter().map(|t| t.to_string()).collect(),
            member_probs: vec![],
        }
    }

    #[test]
    fn predictions_round_trip() {
        let mut rows = vec![row("a", 0.25, true, &["x", "y"]), row("b,c", 0.1, false, &[])];
        rows[0].member_probs = vec![0.2, 0.3];
        rows[1].member_probs = vec![0.1, 0.1];
        let text = write_predictions(&rows, &["run_config {}".into()]);
        assert!(text.starts_with("# run_config {}\ncase_id,prob_high,label,tags,member_0,member_1\n"));
        assert_eq!(read_predictions(&text).unwrap(), rows);
    }

    #[test]
    fn predictions_errors_name_the_line() {
        let text = "case_id,prob_high,label,tags\na,0.5,high,\nb,1.5,low,\n";
        match read_predictions(text) {
            Err(EvalError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("prob_high"));
            }
            other => panic!("{other:?}"),
        }
        assert!(read_predictions("id,p\n").is_err());
        assert!(read_predictions("case_id,prob_high,label,tags\na,0.5,maybe,\n").is_err());
    }

    #[test]
    fn partitions() {
        let rows = vec![
            row("a", 0.9, true, &["s:A", "all"]),
            row("b", 0.2, false, &["s:A", "all"]),
            row("c", 0.7, true, &["s:B", "all"]),
            row("d", 0.6, false, &["s:B", "all"]),
            row("e", 0.1, false, &["s:B", "all"]),
        ];
        let set = ScoredSet::from_rows(&rows).unwrap();
        let cfg = EvaluationConfig { bootstrap_replicates: 50, ..Default::default() };
        assert_eq!(evaluate_partition(&set, "all", &cfg).unwrap(), evaluate(&set, &cfg).unwrap());
        let a = evaluate_partition(&set, "s:A", &cfg).unwrap();
        let b = evaluate_partition(&set, "s:B", &cfg).unwrap();
        assert_eq!(a.n_cases + b.n_cases, 5);
        assert_eq!(b.auroc.point_estimate, 1.0);
        assert!(matches!(evaluate_partition(&set, "none", &cfg), Err(EvalError::EmptyPartition { tag }) if tag == "none"));
    }
}
