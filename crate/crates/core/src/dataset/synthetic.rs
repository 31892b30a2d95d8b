//! Synthetic cohort generator.
//!
//! Background tiles are isotropic standard normal. High-complexity cases
//! carry `k = max(1, round(signal_fraction · n))` signal tiles whose mean
//! is shifted by `class_separation` along a fixed unit direction `u`.
//! Out-of-distribution patients get an extra shift along a direction
//! orthogonal to `u`, which leaves the class likelihood ratio untouched.
//!
//! With `z_i = u·x_i` and `w_i = exp(δ z_i − δ²/2)` the exact likelihood
//! ratio of a bag is `e_k(w) / C(n, k)`, where `e_k` is the elementary
//! symmetric polynomial of degree `k`. The emitted oracle score is the
//! posterior log-odds `ln LR + ln(π / (1 − π))`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::features::{assemble_bag, write_feature_file, TileFeatures, TileRecord};
use super::manifest::write_manifest;
use super::{
    CaseRecord, CrossSection, DatasetError, FeatureBag, Label, Result, SlideRecord,
    IN_DISTRIBUTION_TAG, OOD_TAG,
};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub cases_per_patient_min: usize,
    pub cases_per_patient_max: usize,
    pub prevalence_high: f64,
    /// Bag sizes are log-uniform on `[bag_size_min, bag_size_max]`; the
    /// default `[1, 1024]` has median 32.
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    pub slides_per_case_min: usize,
    pub slides_per_case_max: usize,
    pub sections_per_slide_min: usize,
    pub sections_per_slide_max: usize,
    pub signal_fraction: f64,
    pub class_separation: f64,
    pub feature_dim: usize,
    /// Probability that a patient is out-of-distribution.
    pub ood_fraction: f64,
    pub ood_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            cases_per_patient_min: 1,
            cases_per_patient_max: 2,
            prevalence_high: 0.134,
            bag_size_min: 1,
            bag_size_max: 1024,
            slides_per_case_min: 1,
            slides_per_case_max: 2,
            sections_per_slide_min: 1,
            sections_per_slide_max: 3,
            signal_fraction: 0.2,
            class_separation: 8.0,
            feature_dim: 192,
            ood_fraction: 0.05,
            ood_shift: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DatasetError::Config(m));
        if self.n_patients == 0 {
            return err("n_patients must be at least 1".into());
        }
        for (name, lo, hi) in [
            ("cases_per_patient", self.cases_per_patient_min, self.cases_per_patient_max),
            ("bag_size", self.bag_size_min, self.bag_size_max),
            ("slides_per_case", self.slides_per_case_min, self.slides_per_case_max),
            ("sections_per_slide", self.sections_per_slide_min, self.sections_per_slide_max),
        ] {
            if lo == 0 || lo > hi {
                return err(format!("{name} range [{lo}, {hi}] must satisfy 1 <= min <= max"));
            }
        }
        if self.sections_per_slide_max > u16::MAX as usize {
            return err("sections_per_slide_max exceeds u16 range".into());
        }
        if !(self.prevalence_high > 0.0 && self.prevalence_high < 1.0) {
            return err(format!("prevalence_high {} not in (0, 1)", self.prevalence_high));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return err(format!("signal_fraction {} not in [0, 1]", self.signal_fraction));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return err(format!("class_separation {} must be finite and >= 0", self.class_separation));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) || !self.ood_shift.is_finite() {
            return err("ood_fraction must be in [0, 1] and ood_shift finite".into());
        }
        if self.feature_dim < 2 {
            return err("feature_dim must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleScore {
    pub case_id: String,
    pub score: f64,
    pub label: Label,
}

/// In-memory cohort; `write` materializes it as manifest + feature files.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub config: SyntheticConfig,
    pub cases: Vec<CaseRecord>,
    /// Keyed by the manifest's (relative) `feature_file` path.
    pub features: BTreeMap<PathBuf, TileFeatures>,
    pub oracle: Vec<OracleScore>,
    /// Per case, per bag row: whether the tile carries class signal.
    pub signal_tiles: Vec<Vec<bool>>,
    pub signal_direction: Vec<f64>,
}

impl SyntheticCohort {
    pub fn bag<T: Scalar>(&self, index: usize) -> Result<FeatureBag<T>> {
        assemble_bag(&self.cases[index], |slide| {
            self.features
                .get(slide.feature_file)
                .ok_or_else(|| DatasetError::Validation(format!("no features for slide {}", slide.slide_id)))
        })
    }

    pub fn bags<T: Scalar>(&self) -> Result<Vec<FeatureBag<T>>> {
        (0..self.cases.len()).map(|i| self.bag(i)).collect()
    }

    /// Writes `manifest.json`, `oracle.csv` and the feature files under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, run_config: Option<&Value>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        for (rel, features) in &self.features {
            write_feature_file(dir.join(rel), features)?;
        }
        write_manifest(dir.join("manifest.json"), &self.cases, run_config)?;
        let comments: Vec<String> = run_config.map(|v| format!("run_config {v}")).into_iter().collect();
        write_oracle_scores(dir.join("oracle.csv"), &self.oracle, &comments)
    }
}

/// Each comment becomes a leading `# ` line.
pub fn write_oracle_scores(path: impl AsRef<Path>, scores: &[OracleScore], comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text: String = comments.iter().map(|c| format!("# {c}\n")).collect();
    text.push_str("case_id,oracle_score,label\n");
    for s in scores {
        text.push_str(&format!("{},{},{}\n", s.case_id, s.score, s.label.as_str()));
    }
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}

pub fn read_oracle_scores(path: impl AsRef<Path>) -> Result<Vec<OracleScore>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))?;
        let bad = |f: &str| DatasetError::Format(format!("{}: bad {f} in oracle row", path.display()));
        let case_id = row.get(0).ok_or_else(|| bad("case_id"))?.to_string();
        let score = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("oracle_score"))?;
        let label = row.get(2).and_then(Label::parse).ok_or_else(|| bad("label"))?;
        out.push(OracleScore { case_id, score, label });
    }
    Ok(out)
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn orthogonal_unit<R: Rng>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    loop {
        let mut v = unit_vector(rng, u.len());
        let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln e_k(w)` from `ln w_i`, by the standard O(n·k) recurrence.
fn ln_elementary_symmetric(ln_w: &[f64], k: usize) -> f64 {
    let mut e = vec![f64::NEG_INFINITY; k + 1];
    e[0] = 0.0;
    for (i, &lw) in ln_w.iter().enumerate() {
        for j in (1..=k.min(i + 1)).rev() {
            e[j] = ln_add_exp(e[j], e[j - 1] + lw);
        }
    }
    e[k]
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
}

pub(crate) fn signal_count(n_tiles: usize, signal_fraction: f64) -> usize {
    ((signal_fraction * n_tiles as f64).round() as usize).clamp(1, n_tiles)
}

/// Posterior log-odds of high complexity for a bag, given the projections
/// `z_i = u·x_i` of its tiles.
pub(crate) fn bayes_log_odds(projections: &[f64], separation: f64, signal_fraction: f64, prevalence: f64) -> f64 {
    let n = projections.len();
    let k = signal_count(n, signal_fraction);
    let ln_w: Vec<f64> = projections.iter().map(|z| separation * z - 0.5 * separation * separation).collect();
    let ln_lr = ln_elementary_symmetric(&ln_w, k) - ln_binomial(n, k);
    ln_lr + (prevalence / (1.0 - prevalence)).ln()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let dim = config.feature_dim;
    let mut dir_rng = rng::stream(config.seed, 0);
    let u = unit_vector(&mut dir_rng, dim);
    let v = orthogonal_unit(&mut dir_rng, &u);
    let mut rng = rng::stream(config.seed, 1);

    let (ln_min, ln_max) = ((config.bag_size_min as f64).ln(), (config.bag_size_max as f64).ln());
    let mut cases = Vec::new();
    let mut features = BTreeMap::new();
    let mut oracle = Vec::new();
    let mut signal_tiles = Vec::new();

    for p in 0..config.n_patients {
        let patient_id = format!("P{p:05}");
        let ood = rng.random_bool(config.ood_fraction);
        let n_cases = rng.random_range(config.cases_per_patient_min..=config.cases_per_patient_max);
        for _ in 0..n_cases {
            let case_id = format!("C{:05}", cases.len());
            let label = if rng.random_bool(config.prevalence_high) { Label::High } else { Label::Low };
            let mut tags = BTreeSet::new();
            tags.insert(if ood { OOD_TAG } else { IN_DISTRIBUTION_TAG }.to_string());
            tags.insert(if rng.random_bool(0.5) { "scanner:A" } else { "scanner:B" }.to_string());

            let n_tiles = if ln_min == ln_max {
                config.bag_size_min
            } else {
                (rng.random_range(ln_min..ln_max).exp().round() as usize)
                    .clamp(config.bag_size_min, config.bag_size_max)
            };
            let n_slides = rng.random_range(config.slides_per_case_min..=config.slides_per_case_max);
            let sections: Vec<usize> = (0..n_slides)
                .map(|_| rng.random_range(config.sections_per_slide_min..=config.sections_per_slide_max))
                .collect();
            let units: Vec<(usize, usize)> = sections
                .iter()
                .enumerate()
                .flat_map(|(s, &n)| (0..n).map(move |sec| (s, sec)))
                .collect();
            // tiles per (slide, section); some slides may end up empty
            let mut counts = vec![0usize; units.len()];
            for _ in 0..n_tiles {
                counts[rng.random_range(0..units.len())] += 1;
            }

            let mut is_signal = vec![false; n_tiles];
            if label.is_high() {
                for i in sample(&mut rng, n_tiles, signal_count(n_tiles, config.signal_fraction)) {
                    is_signal[i] = true;
                }
            }

            let mut slides = Vec::with_capacity(n_slides);
            let mut projections = Vec::with_capacity(n_tiles);
            let mut row = 0usize;
            for (s, &n_sections) in sections.iter().enumerate() {
                let slide_id = format!("{case_id}-S{s}");
                let feature_file = PathBuf::from(format!("features/{slide_id}.fbag"));
                let mut records = Vec::new();
                let mut values = Vec::new();
                let mut cross_sections = Vec::new();
                let mut base_row = 0u32;
                for sec in 0..n_sections {
                    let unit = units.iter().position(|&x| x == (s, sec)).unwrap();
                    let count = counts[unit];
                    let width = ((count as f64).sqrt().ceil() as u32).max(1);
                    let mut indices = Vec::with_capacity(count);
                    for t in 0..count as u32 {
                        indices.push(records.len() as u32);
                        records.push(TileRecord { grid_x: t % width, grid_y: base_row + t / width, section_id: sec as u16 });
                        let mut z = 0.0;
                        for j in 0..dim {
                            let mut x: f64 = rng.sample(StandardNormal);
                            if is_signal[row] {
                                x += config.class_separation * u[j];
                            }
                            if ood {
                                x += config.ood_shift * v[j];
                            }
                            let stored = x as f32;
                            z += stored as f64 * u[j];
                            values.push(stored);
                        }
                        projections.push(z);
                        row += 1;
                    }
                    base_row += (count as u32).div_ceil(width) + 1;
                    cross_sections.push(CrossSection { section_id: sec as u16, tile_indices: indices });
                }
                features.insert(feature_file.clone(), TileFeatures::new(dim, records, values)?);
                slides.push(SlideRecord { slide_id, feature_file, sections: cross_sections });
            }

            // OOD shift is orthogonal to u in exact arithmetic; projections
            // include its f32 rounding residue, which is negligible.
            let score = bayes_log_odds(&projections, config.class_separation, config.signal_fraction, config.prevalence_high);
            oracle.push(OracleScore { case_id: case_id.clone(), score, label });
            signal_tiles.push(is_signal);
            cases.push(CaseRecord { case_id, patient_id: patient_id.clone(), label, tags, slides });
        }
    }

    Ok(SyntheticCohort { config: config.clone(), cases, features, oracle, signal_tiles, signal_direction: u })
}
