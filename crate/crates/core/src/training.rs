//! Optimization loop: one specimen per iteration, gradient accumulation,
//! AdamW with a step-halving schedule, periodic validation with
//! best-checkpoint selection, cross-section dropout, and k-fold ensembles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{loss_and_grad, AggregatorConfig, AggregatorParams, Mode, ModelError};
use crate::dataset::{FeatureBag, Label};
use crate::rng;
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFinite { tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub accumulation_steps: u64,
    pub base_lr: f64,
    pub lr_halving_period: u64,
    pub validation_period: u64,
    pub weight_decay: f64,
    pub section_dropout_p: f64,
    pub seed: u64,
}

/// Desk scale: iteration count and periods are the full recipe divided by 50.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 20_000,
            accumulation_steps: 10,
            base_lr: 0.0005,
            lr_halving_period: 2_000,
            validation_period: 200,
            weight_decay: 0.01,
            section_dropout_p: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-length recipe.
    pub fn full_scale() -> Self {
        Self {
            total_iterations: 1_000_000,
            accumulation_steps: 500,
            lr_halving_period: 100_000,
            validation_period: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation_steps == 0 || self.lr_halving_period == 0 || self.validation_period == 0 {
            return Err(TrainError::Config("accumulation, halving and validation periods must be >= 1".into()));
        }
        if self.validation_period % self.accumulation_steps != 0 {
            return Err(TrainError::Config(format!(
                "validation_period {} is not a multiple of accumulation_steps {}",
                self.validation_period, self.accumulation_steps
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.section_dropout_p) {
            return Err(TrainError::Config(format!("section_dropout_p {} not in [0, 1)", self.section_dropout_p)));
        }
        Ok(())
    }
}

pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let halvings = iteration / config.lr_halving_period;
    config.base_lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// AdamW first and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &AggregatorParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update with decoupled weight decay. A non-finite gradient
/// rejects the step and leaves parameters and state untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut AggregatorParams<T>,
    grad: &AggregatorParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.config() != grad.config() || state.m.len() != params.tensors().len() {
        return Err(TrainError::Model(ModelError::Shape("gradient or optimizer state does not match parameters".into())));
    }
    if !(lr > 0.0) {
        return Err(TrainError::Config(format!("learning rate {lr} must be positive")));
    }
    for ((name, _), g) in params.layout().iter().zip(grad.tensors()) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite { tensor: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = T::of(1.0 - BETA1.powi(t));
    let c2 = T::of(1.0 - BETA2.powi(t));
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (lr_t, decay, eps) = (T::of(lr), T::of(lr * weight_decay), T::of(ADAM_EPS));
    for (((w, g), m), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] = w[i] - decay * w[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Running mean of gradients.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T> {
    sum: AggregatorParams<T>,
    count: u64,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(params: &AggregatorParams<T>) -> Self {
        Self { sum: params.zeros_like(), count: 0 }
    }

    pub fn add(&mut self, grad: &AggregatorParams<T>) -> Result<()> {
        self.sum.add_assign(grad)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean gradient; resets the accumulator.
    pub fn take_mean(&mut self) -> AggregatorParams<T> {
        let zero = self.sum.zeros_like();
        let mut mean = std::mem::replace(&mut self.sum, zero);
        if self.count > 0 {
            mean.scale(T::one() / T::of(self.count as f64));
        }
        self.count = 0;
        mean
    }
}

/// Drops each cross-section with probability `p`. If every section would
/// be dropped, one is kept, chosen uniformly.
pub fn cross_section_dropout<T: Scalar, R: Rng + ?Sized>(bag: &FeatureBag<T>, p: f64, rng: &mut R) -> FeatureBag<T> {
    let sections = bag.sections();
    if p == 0.0 || sections.len() == 1 {
        return bag.clone();
    }
    let mut keep: Vec<bool> = sections.iter().map(|_| rng.random::<f64>() >= p).collect();
    if !keep.iter().any(|&k| k) {
        keep[rng.random_range(0..sections.len())] = true;
    }
    if keep.iter().all(|&k| k) {
        return bag.clone();
    }
    let rows: Vec<usize> = bag
        .tile_meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let idx = sections.iter().position(|(s, id)| *s == m.slide_id && *id == m.section_id).unwrap();
            keep[idx]
        })
        .map(|(i, _)| i)
        .collect();
    bag.select(&rows).expect("survivors are nonempty")
}

/// A development specimen with its label and fold.
#[derive(Clone, Debug)]
pub struct LabeledBag<T> {
    pub bag: FeatureBag<T>,
    pub label: Label,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub validation_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub best_iteration: Option<u64>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&HistoryRecord> {
        let it = self.best_iteration?;
        self.records.iter().find(|r| r.iteration == it)
    }

    /// `iteration,validation_loss,lr`, each comment line prefixed by `# `.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("iteration,validation_loss,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.iteration, r.validation_loss, r.lr));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult<T> {
    pub fold: usize,
    pub params: AggregatorParams<T>,
    pub history: TrainHistory,
}

/// Mean Eval-mode cross-entropy.
pub fn mean_loss<T: Scalar>(params: &AggregatorParams<T>, cases: &[&LabeledBag<T>]) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let (loss, _) = loss_and_grad(params, &c.bag, c.label, Mode::Eval)?;
        total += loss.to_f64_lossy();
    }
    Ok(total / cases.len() as f64)
}

/// Trains on every fold except `fold_id` and validates on `fold_id`.
///
/// A partial accumulation window left at the end is discarded. If no
/// validation happens (`total_iterations < validation_period`) the final
/// parameters are returned.
pub fn train_fold<T: Scalar>(
    cases: &[LabeledBag<T>],
    fold_id: usize,
    agg_config: &AggregatorConfig,
    config: &TrainConfig,
) -> Result<FoldResult<T>> {
    config.validate()?;
    agg_config.validate()?;
    let train: Vec<&LabeledBag<T>> = cases.iter().filter(|c| c.fold != fold_id).collect();
    let valid: Vec<&LabeledBag<T>> = cases.iter().filter(|c| c.fold == fold_id).collect();
    if train.is_empty() {
        return Err(TrainError::Config(format!("training folds (all but {fold_id}) are empty")));
    }
    if valid.is_empty() {
        return Err(TrainError::Config(format!("validation fold {fold_id} is empty")));
    }
    if let Some(c) = cases.iter().find(|c| c.bag.dim() != agg_config.feature_dim) {
        return Err(TrainError::Config(format!(
            "case {} has feature dimension {}, model expects {}",
            c.bag.case_id(),
            c.bag.dim(),
            agg_config.feature_dim
        )));
    }

    let mut params = AggregatorParams::<T>::init(agg_config, rng::derive_seed(config.seed, "init"))?;
    let mut state = OptimizerState::new(&params);
    let mut acc = GradAccumulator::new(&params);
    let mut rng = rng::seeded(rng::derive_seed(config.seed, "iterations"));
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, AggregatorParams<T>)> = None;

    for it in 0..config.total_iterations {
        let case = train[rng.random_range(0..train.len())];
        let bag = cross_section_dropout(&case.bag, config.section_dropout_p, &mut rng);
        let (_, grad) = loss_and_grad(&params, &bag, case.label, Mode::Train(&mut rng))?;
        acc.add(&grad)?;
        let done = it + 1;
        if done % config.accumulation_steps == 0 {
            let lr = lr_at(it, config);
            adamw_step(&mut params, &acc.take_mean(), &mut state, lr, config.weight_decay)?;
            if done % config.validation_period == 0 {
                let loss = mean_loss(&params, &valid)?;
                history.records.push(HistoryRecord { iteration: done, validation_loss: loss, lr });
                if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, params.clone()));
                    history.best_iteration = Some(done);
                }
            }
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok(FoldResult { fold: fold_id, params, history })
}

/// Seed used for fold `fold` of an ensemble trained with `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_seed(seed, &format!("fold-{fold}"))
}

/// One model per fold, each validated on its own fold.
pub fn train_ensemble<T: Scalar>(
    cases: &[LabeledBag<T>],
    n_folds: usize,
    agg_config: &AggregatorConfig,
    config: &TrainConfig,
) -> Result<Vec<FoldResult<T>>> {
    if n_folds < 2 {
        return Err(TrainError::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    (0..n_folds)
        .map(|k| {
            let fold_config = TrainConfig { seed: fold_seed(config.seed, k), ..config.clone() };
            train_fold(cases, k, agg_config, &fold_config)
        })
        .collect()
}
