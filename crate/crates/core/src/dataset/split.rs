//! Patient-level development/test split and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{CaseRecord, DatasetError, Result, OOD_TAG};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitSet {
    Development,
    Test,
}

impl SplitSet {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitSet::Development => "development",
            SplitSet::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatientAssignment {
    pub set: SplitSet,
    /// Cross-validation fold, development patients only.
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    patients: BTreeMap<String, PatientAssignment>,
}

impl SplitAssignment {
    pub fn patients(&self) -> &BTreeMap<String, PatientAssignment> {
        &self.patients
    }

    pub fn get(&self, patient_id: &str) -> Option<PatientAssignment> {
        self.patients.get(patient_id).copied()
    }

    pub fn set_of(&self, case: &CaseRecord) -> Option<SplitSet> {
        self.get(&case.patient_id).map(|a| a.set)
    }

    pub fn fold_of(&self, case: &CaseRecord) -> Option<usize> {
        self.get(&case.patient_id).and_then(|a| a.fold)
    }

    pub fn n_folds(&self) -> usize {
        self.patients.values().filter_map(|a| a.fold).max().map_or(0, |m| m + 1)
    }

    pub fn cases_in<'a>(&self, cases: &'a [CaseRecord], set: SplitSet) -> Vec<&'a CaseRecord> {
        cases.iter().filter(|c| self.set_of(c) == Some(set)).collect()
    }

    pub fn fold_cases<'a>(&self, cases: &'a [CaseRecord], fold: usize) -> Vec<&'a CaseRecord> {
        cases.iter().filter(|c| self.fold_of(c) == Some(fold)).collect()
    }

    /// CSV `patient_id,set,fold` (fold empty for test patients).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,set,fold\n");
        for (patient, a) in &self.patients {
            let fold = a.fold.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!("{patient},{},{fold}\n", a.set.as_str()));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut patients = BTreeMap::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| DatasetError::Format(format!("split row {line}: {e}")))?;
            let bad = |what: &str| DatasetError::Format(format!("split row {line}: bad {what}"));
            let patient = row.get(0).ok_or_else(|| bad("patient_id"))?.to_string();
            let set = match row.get(1) {
                Some("development") => SplitSet::Development,
                Some("test") => SplitSet::Test,
                _ => return Err(bad("set")),
            };
            let fold = match row.get(2).unwrap_or("") {
                "" => None,
                f => Some(f.parse().map_err(|_| bad("fold"))?),
            };
            if patients.insert(patient.clone(), PatientAssignment { set, fold }).is_some() {
                return Err(DatasetError::Validation(format!("patient {patient} listed twice in split")));
            }
        }
        Ok(Self { patients })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_csv(&text)
    }
}

struct PatientInfo {
    high: bool,
    ood: bool,
}

fn patient_info(cases: &[CaseRecord]) -> BTreeMap<String, PatientInfo> {
    let mut out: BTreeMap<String, PatientInfo> = BTreeMap::new();
    for case in cases {
        let info = out.entry(case.patient_id.clone()).or_insert(PatientInfo { high: false, ood: false });
        info.high |= case.label.is_high();
        info.ood |= case.has_tag(OOD_TAG);
    }
    out
}

/// Patient-level split. Patients with any out-of-distribution case are
/// always placed in the test set; the remaining test slots are filled at
/// random (optionally stratified by whether the patient has a
/// high-complexity case) so that the test set holds
/// `round(test_fraction · n_patients)` patients, clamped to leave both
/// sides non-empty.
pub fn split_patients(
    cases: &[CaseRecord],
    test_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<SplitAssignment> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Config(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let info = patient_info(cases);
    let n = info.len();
    if n < 2 {
        return Err(DatasetError::Size(format!("need at least 2 patients to split, found {n}")));
    }
    let target = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let forced: Vec<&String> = info.iter().filter(|(_, i)| i.ood).map(|(p, _)| p).collect();
    if forced.len() >= n {
        return Err(DatasetError::Size("every patient is out-of-distribution; development set would be empty".into()));
    }
    let mut rng = rng::seeded(seed);
    let need = target.saturating_sub(forced.len());
    let mut test: BTreeSet<&String> = forced.into_iter().collect();

    if stratified {
        let mut high: Vec<&String> = info.iter().filter(|(_, i)| !i.ood && i.high).map(|(p, _)| p).collect();
        let mut low: Vec<&String> = info.iter().filter(|(_, i)| !i.ood && !i.high).map(|(p, _)| p).collect();
        high.shuffle(&mut rng);
        low.shuffle(&mut rng);
        let free = high.len() + low.len();
        let n_high = if free == 0 { 0 } else { ((need as f64) * high.len() as f64 / free as f64).round() as usize };
        let n_high = n_high.min(high.len()).min(need);
        let n_low = (need - n_high).min(low.len());
        // top up from the high pool if the low pool ran short
        let n_high = (need - n_low).min(high.len());
        test.extend(high.into_iter().take(n_high));
        test.extend(low.into_iter().take(n_low));
    } else {
        let mut free: Vec<&String> = info.iter().filter(|(_, i)| !i.ood).map(|(p, _)| p).collect();
        free.shuffle(&mut rng);
        test.extend(free.into_iter().take(need));
    }

    let patients = info
        .keys()
        .map(|p| {
            let set = if test.contains(p) { SplitSet::Test } else { SplitSet::Development };
            (p.clone(), PatientAssignment { set, fold: None })
        })
        .collect();
    Ok(SplitAssignment { patients })
}

/// Deals development patients into `k` folds, stratified by whether a
/// patient has any high-complexity case. Fold sizes differ by at most one.
pub fn assign_folds(
    cases: &[CaseRecord],
    split: &SplitAssignment,
    k: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    if k < 2 {
        return Err(DatasetError::Config(format!("need at least 2 folds, got {k}")));
    }
    let info = patient_info(cases);
    let dev: Vec<&String> = split
        .patients
        .iter()
        .filter(|(_, a)| a.set == SplitSet::Development)
        .map(|(p, _)| p)
        .collect();
    if dev.len() < k {
        return Err(DatasetError::Size(format!("{} development patients cannot fill {k} folds", dev.len())));
    }
    let mut rng = rng::seeded(seed);
    let is_high = |p: &String| info.get(p).is_some_and(|i| i.high);
    let mut high: Vec<&String> = dev.iter().copied().filter(|p| is_high(p)).collect();
    let mut low: Vec<&String> = dev.iter().copied().filter(|p| !is_high(p)).collect();
    high.shuffle(&mut rng);
    low.shuffle(&mut rng);

    let mut out = split.clone();
    for (i, p) in high.into_iter().chain(low).enumerate() {
        out.patients.get_mut(p).expect("development patient").fold = Some(i % k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, SlideRecord};
    use std::collections::HashMap;

    fn case(id: &str, patient: &str, label: Label, ood: bool) -> CaseRecord {
        let mut tags = BTreeSet::new();
        if ood {
            tags.insert(OOD_TAG.to_string());
        }
        CaseRecord {
            case_id: id.into(),
            patient_id: patient.into(),
            label,
            tags,
            slides: vec![SlideRecord { slide_id: format!("{id}-s"), feature_file: "x".into(), sections: vec![] }],
        }
    }

    fn cohort(n: usize, n_high: usize) -> Vec<CaseRecord> {
        (0..n)
            .map(|i| {
                let label = if i < n_high { Label::High } else { Label::Low };
                case(&format!("c{i}"), &format!("p{i:03}"), label, false)
            })
            .collect()
    }

    #[test]
    fn ten_patients_twenty_percent_gives_two_test_patients() {
        for seed in 0..20 {
            let s = split_patients(&cohort(10, 3), 0.2, seed, false).unwrap();
            let test = s.patients().values().filter(|a| a.set == SplitSet::Test).count();
            assert_eq!(test, 2);
            assert_eq!(s.patients().len(), 10);
        }
    }

    #[test]
    fn multi_case_patient_is_atomic() {
        let mut cases = cohort(9, 2);
        cases.push(case("x1", "shared", Label::High, false));
        cases.push(case("x2", "shared", Label::Low, false));
        cases.push(case("x3", "shared", Label::Low, false));
        for seed in 0..50 {
            let s = split_patients(&cases, 0.2, seed, seed % 2 == 0).unwrap();
            let sets: BTreeSet<_> = cases.iter().filter(|c| c.patient_id == "shared").map(|c| s.set_of(c)).collect();
            assert_eq!(sets.len(), 1);
        }
    }

    #[test]
    fn ood_patients_forced_to_test() {
        let mut cases = cohort(10, 2);
        cases.push(case("o1", "ood-a", Label::Low, true));
        cases.push(case("o2", "ood-b", Label::High, false));
        cases.push(case("o3", "ood-b", Label::High, true));
        for seed in 0..20 {
            let s = split_patients(&cases, 0.2, seed, false).unwrap();
            assert_eq!(s.get("ood-a").unwrap().set, SplitSet::Test);
            assert_eq!(s.get("ood-b").unwrap().set, SplitSet::Test);
        }
    }

    #[test]
    fn split_is_deterministic_and_validates_size() {
        let cases = cohort(30, 5);
        assert_eq!(split_patients(&cases, 0.2, 9, false).unwrap(), split_patients(&cases, 0.2, 9, false).unwrap());
        assert!(matches!(split_patients(&cohort(1, 0), 0.2, 0, false), Err(DatasetError::Size(_))));
        assert!(matches!(split_patients(&cases, 1.0, 0, false), Err(DatasetError::Config(_))));
    }

    #[test]
    fn stratified_split_keeps_class_balance() {
        let cases = cohort(100, 20);
        let s = split_patients(&cases, 0.2, 3, true).unwrap();
        let test_high = cases.iter().filter(|c| c.label.is_high() && s.set_of(c) == Some(SplitSet::Test)).count();
        assert_eq!(test_high, 4);
    }

    #[test]
    fn mean_test_fraction_over_seeds() {
        let cases = cohort(100, 13);
        let total: usize = (0..1000)
            .map(|seed| {
                let s = split_patients(&cases, 0.2, seed, false).unwrap();
                s.patients().values().filter(|a| a.set == SplitSet::Test).count()
            })
            .sum();
        let mean = total as f64 / 1000.0 / 100.0;
        assert!((mean - 0.2).abs() <= 0.02, "mean test fraction {mean}");
    }

    fn all_dev(cases: &[CaseRecord]) -> SplitAssignment {
        let patients = cases
            .iter()
            .map(|c| (c.patient_id.clone(), PatientAssignment { set: SplitSet::Development, fold: None }))
            .collect();
        SplitAssignment { patients }
    }

    #[test]
    fn stratified_folds_get_one_of_each() {
        let cases = cohort(10, 5);
        let folds = assign_folds(&cases, &all_dev(&cases), 5, 11).unwrap();
        for f in 0..5 {
            let members = folds.fold_cases(&cases, f);
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|c| c.label.is_high()).count(), 1);
        }
    }

    #[test]
    fn twenty_one_patients_five_folds() {
        let cases = cohort(21, 4);
        let folds = assign_folds(&cases, &all_dev(&cases), 5, 0).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| folds.fold_cases(&cases, f).len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![5, 4, 4, 4, 4]);
    }

    #[test]
    fn folds_partition_development_set() {
        let mut cases = cohort(37, 7);
        cases.push(case("dup", "p000", Label::Low, false));
        for seed in 0..100 {
            let split = split_patients(&cases, 0.2, seed, false).unwrap();
            let folds = assign_folds(&cases, &split, 5, seed).unwrap();
            let mut seen: HashMap<&str, usize> = HashMap::new();
            for (p, a) in folds.patients() {
                match a.set {
                    SplitSet::Development => {
                        let f = a.fold.expect("dev patient has a fold");
                        assert!(f < 5);
                        assert!(seen.insert(p.as_str(), f).is_none());
                    }
                    SplitSet::Test => assert!(a.fold.is_none()),
                }
            }
            let dev = split.patients().values().filter(|a| a.set == SplitSet::Development).count();
            assert_eq!(seen.len(), dev);
        }
    }

    #[test]
    fn too_many_folds_is_a_size_error() {
        let cases = cohort(3, 1);
        assert!(matches!(assign_folds(&cases, &all_dev(&cases), 5, 0), Err(DatasetError::Size(_))));
    }

    #[test]
    fn csv_round_trip() {
        let cases = cohort(12, 3);
        let split = split_patients(&cases, 0.25, 1, false).unwrap();
        let folds = assign_folds(&cases, &split, 3, 1).unwrap();
        assert_eq!(SplitAssignment::from_csv(&folds.to_csv()).unwrap(), folds);
    }
}
