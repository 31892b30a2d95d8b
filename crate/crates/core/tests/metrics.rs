use proptest::prelude::*;
use triage_core::evaluation::{
    auprc, auroc, calibration, pr_points, read_predictions, roc_points, stratified_bootstrap_ci, step_area,
    trapezoid_area, write_predictions, PredictionRow,
};
use triage_core::dataset::Label;

fn scored_set(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max)
        .prop_flat_map(|n| (prop::collection::vec(0u8..8, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 7.0).collect(), l))
}

fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

proptest! {
    #[test]
    fn auroc_matches_pair_count((s, l) in scored_set(12)) {
        prop_assert!((auroc(&s, &l).unwrap() - pair_count_auroc(&s, &l)).abs() < 1e-15);
    }

    #[test]
    fn curve_areas_match_metrics((s, l) in scored_set(50)) {
        let roc = roc_points(&s, &l).unwrap();
        prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
        prop_assert!((trapezoid_area(&roc.points) - auroc(&s, &l).unwrap()).abs() <= 1e-12);
        let pr = pr_points(&s, &l).unwrap();
        prop_assert!((step_area(&pr.points) - auprc(&s, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn flipping_labels_complements_auroc((s, l) in scored_set(50)) {
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        prop_assert!((auroc(&s, &flipped).unwrap() - (1.0 - auroc(&s, &l).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((s, l) in scored_set(50)) {
        let squashed: Vec<f64> = s.iter().map(|x| 1.0 / (1.0 + (-3.0 * x).exp())).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&squashed, &l).unwrap());
        prop_assert_eq!(auprc(&s, &l).unwrap(), auprc(&squashed, &l).unwrap());
    }

    #[test]
    fn calibration_counts_every_case((s, l) in scored_set(50), bins in 1usize..12) {
        let report = calibration(&s, &l, bins).unwrap();
        prop_assert_eq!(report.bins.iter().map(|b| b.count).sum::<u64>(), s.len() as u64);
        prop_assert!((0.0..=1.0).contains(&report.ece));
    }
}

#[test]
fn ece_is_zero_when_scores_equal_bin_frequencies() {
    // bin of 0.25s with one positive in four, bin of 0.75s with three in four
    let scores = [0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
    let labels = [true, false, false, false, true, true, true, false];
    assert_eq!(calibration(&scores, &labels, 4).unwrap().ece, 0.0);
}

#[test]
fn bootstrap_is_reproducible_and_brackets_the_estimate() {
    let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 60.0).collect();
    let labels: Vec<bool> = (0..60).map(|i| (i * 37) % 60 > 25 || i % 7 == 0).collect();
    let a = stratified_bootstrap_ci(auroc, &scores, &labels, 500, 9).unwrap();
    assert_eq!(a, stratified_bootstrap_ci(auroc, &scores, &labels, 500, 9).unwrap());
    assert_ne!(a, stratified_bootstrap_ci(auroc, &scores, &labels, 500, 10).unwrap());
    assert!(a.lower <= a.point_estimate && a.point_estimate <= a.upper);
}

#[test]
fn predictions_round_trip_and_partition_by_tag() {
    let rows: Vec<PredictionRow> = (0..6)
        .map(|i| PredictionRow {
            case_id: format!("c{i}"),
            prob_high: i as f64 / 7.0,
            label: if i % 2 == 0 { Label::High } else { Label::Low },
            tags: [if i < 3 { "in_distribution" } else { "out_of_distribution" }.to_string()].into(),
            member_probs: vec![i as f64 / 7.0, 0.5],
        })
        .collect();
    let text = write_predictions(&rows, &["note".into()]);
    let back = read_predictions(&text).unwrap();
    assert_eq!(back, rows);
    let set = triage_core::evaluation::ScoredSet::from_rows(&back).unwrap();
    let ood = set.filter_tag("out_of_distribution");
    assert_eq!(ood.case_ids, ["c3", "c4", "c5"]);
}
