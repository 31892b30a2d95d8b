//! Monte Carlo case-assignment experiment.
//!
//! Each iteration draws a day's cases with replacement from a scored pool
//! and assigns them twice: uniformly at random, and by descending score
//! with the top block going to the experts. The prevented count is the
//! drop in high-complexity cases reaching general pathologists, paired
//! on the same sample.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::percentile;
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_pathologists: usize,
    pub n_experts: usize,
    pub cases_per_pathologist: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { n_pathologists: 5, n_experts: 1, cases_per_pathologist: 100, iterations: 10_000, seed: 0 }
    }
}

impl SimConfig {
    pub fn cases_per_iteration(&self) -> usize {
        self.n_pathologists * self.cases_per_pathologist
    }

    pub fn n_generals(&self) -> usize {
        self.n_pathologists - self.n_experts
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.n_experts >= self.n_pathologists {
            return Err(SimError::Config(format!(
                "need 1 <= n_experts < n_pathologists, got {} of {}",
                self.n_experts, self.n_pathologists
            )));
        }
        if self.cases_per_pathologist == 0 || self.iterations == 0 {
            return Err(SimError::Config("cases_per_pathologist and iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub score: f64,
    pub high: bool,
}

/// High-complexity count per pathologist; experts first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentOutcome {
    pub expert_high: Vec<u32>,
    pub general_high: Vec<u32>,
}

impl AssignmentOutcome {
    pub fn expert_total(&self) -> u32 {
        self.expert_high.iter().sum()
    }

    pub fn general_total(&self) -> u32 {
        self.general_high.iter().sum()
    }

    fn from_order(cases: &[ScoredCase], order: &[usize], config: &SimConfig) -> Self {
        let counts: Vec<u32> = order
            .chunks(config.cases_per_pathologist)
            .map(|block| block.iter().filter(|&&i| cases[i].high).count() as u32)
            .collect();
        Self { expert_high: counts[..config.n_experts].to_vec(), general_high: counts[config.n_experts..].to_vec() }
    }
}

fn check_size(cases: &[ScoredCase], config: &SimConfig) -> Result<()> {
    if cases.len() != config.cases_per_iteration() {
        return Err(SimError::Argument(format!(
            "expected {} cases, got {}",
            config.cases_per_iteration(),
            cases.len()
        )));
    }
    Ok(())
}

/// Random permutation cut into equal blocks.
pub fn assign_baseline<R: Rng + ?Sized>(cases: &[ScoredCase], config: &SimConfig, rng: &mut R) -> Result<AssignmentOutcome> {
    check_size(cases, config)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(rng);
    Ok(AssignmentOutcome::from_order(cases, &order, config))
}

/// Descending score, ties in random order; the top block is shared among
/// experts at random, the rest among generals at random.
pub fn assign_triage<R: Rng + ?Sized>(cases: &[ScoredCase], config: &SimConfig, rng: &mut R) -> Result<AssignmentOutcome> {
    check_size(cases, config)?;
    if let Some(i) = cases.iter().position(|c| !c.score.is_finite()) {
        return Err(SimError::Argument(format!("case {i} has no valid score")));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| cases[b].score.total_cmp(&cases[a].score));
    let cut = config.n_experts * config.cases_per_pathologist;
    order[..cut].shuffle(rng);
    order[cut..].shuffle(rng);
    Ok(AssignmentOutcome::from_order(cases, &order, config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub sampled_high: u32,
    pub baseline: AssignmentOutcome,
    pub triage: AssignmentOutcome,
}

impl IterationRecord {
    pub fn prevented(&self) -> i64 {
        self.baseline.general_total() as i64 - self.triage.general_total() as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CountSummary {
    fn of(mut values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.sort_by(f64::total_cmp);
        Self { mean, lower: percentile(&values, 0.025), upper: percentile(&values, 0.975) }
    }
}

/// Per-pathologist high counts, pooled over pathologists of each role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub expert: CountSummary,
    pub general: CountSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimConfig,
    pub pool_size: usize,
    pub pool_prevalence: f64,
    pub baseline: PolicySummary,
    pub triage: PolicySummary,
    pub prevented: CountSummary,
}

fn summarize(records: &[IterationRecord], pick: impl Fn(&IterationRecord) -> &AssignmentOutcome) -> PolicySummary {
    let expert = records.iter().flat_map(|r| pick(r).expert_high.iter().map(|&c| c as f64)).collect();
    let general = records.iter().flat_map(|r| pick(r).general_high.iter().map(|&c| c as f64)).collect();
    PolicySummary { expert: CountSummary::of(expert), general: CountSummary::of(general) }
}

/// Runs every iteration; iteration `i` draws from stream `i` of the seed.
pub fn simulate(pool: &[ScoredCase], config: &SimConfig) -> Result<(SimulationReport, Vec<IterationRecord>)> {
    config.validate()?;
    if pool.is_empty() {
        return Err(SimError::Argument("case pool is empty".into()));
    }
    let n = config.cases_per_iteration();
    let records: Vec<IterationRecord> = (0..config.iterations)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream(config.seed, i as u64);
            let sample: Vec<ScoredCase> = (0..n).map(|_| pool[g.random_range(0..pool.len())]).collect();
            let baseline = assign_baseline(&sample, config, &mut g)?;
            let triage = assign_triage(&sample, config, &mut g)?;
            let sampled_high = sample.iter().filter(|c| c.high).count() as u32;
            Ok(IterationRecord { sampled_high, baseline, triage })
        })
        .collect::<Result<_>>()?;
    let report = SimulationReport {
        config: config.clone(),
        pool_size: pool.len(),
        pool_prevalence: pool.iter().filter(|c| c.high).count() as f64 / pool.len() as f64,
        baseline: summarize(&records, |r| &r.baseline),
        triage: summarize(&records, |r| &r.triage),
        prevented: CountSummary::of(records.iter().map(|r| r.prevented() as f64).collect()),
    };
    Ok((report, records))
}

/// One row per iteration with a column per pathologist and policy.
pub fn iterations_csv(records: &[IterationRecord], config: &SimConfig, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    let mut header = vec!["iteration".to_string(), "sampled_high".into()];
    for policy in ["baseline", "triage"] {
        header.extend((0..config.n_experts).map(|e| format!("{policy}_expert_{e}")));
        header.extend((0..config.n_generals()).map(|g| format!("{policy}_general_{g}")));
    }
    header.push("prevented".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![i.to_string(), r.sampled_high.to_string()];
        for o in [&r.baseline, &r.triage] {
            row.extend(o.expert_high.iter().chain(&o.general_high).map(|c| c.to_string()));
        }
        row.push(r.prevented().to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
