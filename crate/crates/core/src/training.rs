//! Logistic-regression heads trained with an optional MMD fairness penalty
//! (in-processing), and the linear "emfairening" delta model that corrects a
//! frozen baseline in logit space (post-processing).
//!
//! In-processing minimizes `CE(p, y) + lambda * MMD^2(p | y=0, group ; p | y=0, majority)`
//! over the head's predictions `p`. Post-processing keeps the baseline `p_bl`
//! fixed and minimizes `mean KL(p_bl || p_pp) + lambda * MMD^2(...)` over
//! `p_pp = sigmoid(logit(p_bl) + delta(x))`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, EmbeddingTable, Example, GroupPair, Split};
use crate::fairloss::{self, clamp_prob, is_unclamped, mmd2_gradient, sigmoid, KernelSpec, LossError};

/// At most this many examples per conditioning set enter the epoch-end MMD trace.
const TRACE_MMD_CAP: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("embedding has length {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid remediation config: {0}")]
    Config(String),
    #[error("{split} split is empty")]
    EmptySplit { split: Split },
    #[error("lambda > 0 but the {side} conditioning set ({name}, label 0) is empty")]
    EmptyConditioningSet { side: &'static str, name: String },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("baseline predictions missing for {count} ids, e.g. {sample:?}")]
    BaselineCoverage { count: usize, sample: Vec<String> },
    #[error("embedding missing for id {id}")]
    MissingFeatures { id: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dimension: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dimension],
            bias: 0.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn is_zero(&self) -> bool {
        self.bias == 0.0 && self.weights.iter().all(|&w| w == 0.0)
    }

    /// `weights . x + bias`
    pub fn linear(&self, x: &[f64]) -> Result<f64, TrainError> {
        if x.len() != self.weights.len() {
            return Err(TrainError::Dimension {
                expected: self.weights.len(),
                found: x.len(),
            });
        }
        Ok(self.linear_unchecked(x))
    }

    fn linear_unchecked(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

pub fn predict(model: &LinearModel, embedding: &[f64]) -> Result<f64, TrainError> {
    Ok(sigmoid(model.linear(embedding)?))
}

/// Predictions of `model` for every example of `split`, keyed by id.
pub fn predict_split(model: &LinearModel, dataset: &Dataset, split: Split) -> Result<HashMap<String, f64>, TrainError> {
    dataset
        .split(split)
        .iter()
        .map(|ex| Ok((ex.id.clone(), predict(model, &ex.embedding)?)))
        .collect()
}

/// Predictions of `model` for every example in the dataset.
pub fn predict_all(model: &LinearModel, dataset: &Dataset) -> Result<HashMap<String, f64>, TrainError> {
    dataset
        .examples()
        .map(|ex| Ok((ex.id.clone(), predict(model, &ex.embedding)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemediationConfig {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    pub pair: GroupPair,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_min_group_negatives")]
    pub min_group_negatives_per_batch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    256
}
fn default_min_group_negatives() -> usize {
    32
}

impl RemediationConfig {
    pub fn new(pair: GroupPair) -> Self {
        RemediationConfig {
            lambda: 0.0,
            kernel: KernelSpec::default(),
            pair,
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            min_group_negatives_per_batch: default_min_group_negatives(),
            seed: 0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.min_group_negatives_per_batch == 0 {
            return bad("min_group_negatives_per_batch must be positive".into());
        }
        if self.batch_size < 2 * self.min_group_negatives_per_batch {
            return bad(format!(
                "batch_size {} must be at least twice min_group_negatives_per_batch {}",
                self.batch_size, self.min_group_negatives_per_batch
            ));
        }
        self.pair.validate()?;
        self.kernel.validate()?;
        Ok(())
    }
}

/// Loss value split into its terms. `fairness` is `None` when lambda is zero:
/// the MMD term is then never evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub task: f64,
    pub fairness: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradient {
    pub terms: LossTerms,
    pub grad_weights: Vec<f64>,
    pub grad_bias: f64,
}

/// Loss after an epoch, measured on the full training split (fairness term on
/// a fixed strided subsample of each conditioning set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

/// Adds `lambda * MMD^2` over the probabilities at `group` and `majority` to
/// the per-instance logit gradient `dz`.
fn add_fairness_term(
    probs: &[f64],
    group: &[usize],
    majority: &[usize],
    lambda: f64,
    kernel: &KernelSpec,
    dz: &mut [f64],
) -> Result<Option<f64>, TrainError> {
    if lambda == 0.0 {
        return Ok(None);
    }
    if group.is_empty() {
        return Err(TrainError::EmptyConditioningSet {
            side: "group",
            name: String::new(),
        });
    }
    if majority.is_empty() {
        return Err(TrainError::EmptyConditioningSet {
            side: "majority",
            name: String::new(),
        });
    }
    let a: Vec<f64> = group.iter().map(|&i| probs[i]).collect();
    let b: Vec<f64> = majority.iter().map(|&i| probs[i]).collect();
    let g = mmd2_gradient(&a, &b, kernel)?;
    for (&i, ga) in group.iter().zip(&g.grad_a) {
        dz[i] += lambda * ga * probs[i] * (1.0 - probs[i]);
    }
    for (&i, gb) in majority.iter().zip(&g.grad_b) {
        dz[i] += lambda * gb * probs[i] * (1.0 - probs[i]);
    }
    Ok(Some(g.value))
}

fn backprop(rows: &[&[f64]], dz: &[f64], dimension: usize) -> (Vec<f64>, f64) {
    let mut grad_w = vec![0.0; dimension];
    let mut grad_b = 0.0;
    for (x, &g) in rows.iter().zip(dz) {
        if g == 0.0 {
            continue;
        }
        for (gw, v) in grad_w.iter_mut().zip(x.iter()) {
            *gw += g * v;
        }
        grad_b += g;
    }
    (grad_w, grad_b)
}

fn check_rows(model: &LinearModel, rows: &[&[f64]]) -> Result<(), TrainError> {
    if rows.is_empty() {
        return Err(LossError::Empty("loss").into());
    }
    for x in rows {
        if x.len() != model.dimension() {
            return Err(TrainError::Dimension {
                expected: model.dimension(),
                found: x.len(),
            });
        }
    }
    Ok(())
}

/// In-processing loss `CE + lambda * MMD^2` and its gradient.
///
/// `group` and `majority` index into `rows` and select the two conditioning
/// sets (label-0 examples of each side).
pub fn in_processing_loss(
    model: &LinearModel,
    rows: &[&[f64]],
    labels: &[bool],
    group: &[usize],
    majority: &[usize],
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<LossAndGradient, TrainError> {
    check_rows(model, rows)?;
    if labels.len() != rows.len() {
        return Err(LossError::LengthMismatch {
            left: rows.len(),
            right: labels.len(),
        }
        .into());
    }
    let n = rows.len() as f64;
    let probs: Vec<f64> = rows.iter().map(|x| sigmoid(model.linear_unchecked(x))).collect();
    let task = fairloss::cross_entropy(&probs, labels)?;
    // d CE / d z = (p - y) / n, zero where the clamp is active
    let mut dz: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if is_unclamped(p) {
                (p - if y { 1.0 } else { 0.0 }) / n
            } else {
                0.0
            }
        })
        .collect();
    let fairness = add_fairness_term(&probs, group, majority, lambda, kernel, &mut dz)?;
    let (grad_weights, grad_bias) = backprop(rows, &dz, model.dimension());
    Ok(LossAndGradient {
        terms: LossTerms {
            task,
            fairness,
            total: task + lambda * fairness.unwrap_or(0.0),
        },
        grad_weights,
        grad_bias,
    })
}

/// `sigmoid(logit(p_bl) + delta_logit)`; a zero delta returns `p_bl` unchanged.
pub fn postprocess_combine(p_bl: f64, delta_logit: f64) -> Result<f64, TrainError> {
    if !(p_bl > 0.0 && p_bl < 1.0) {
        return Err(LossError::Boundary(p_bl).into());
    }
    if delta_logit == 0.0 {
        return Ok(p_bl);
    }
    Ok(sigmoid(fairloss::logit(clamp_prob(p_bl))? + delta_logit))
}

/// Post-processing loss `mean KL(p_bl || p_pp) + lambda * MMD^2` and its
/// gradient with respect to the delta model. `baseline` holds the frozen
/// baseline probabilities for `rows`.
pub fn post_processing_loss(
    delta: &LinearModel,
    rows: &[&[f64]],
    baseline: &[f64],
    group: &[usize],
    majority: &[usize],
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<LossAndGradient, TrainError> {
    check_rows(delta, rows)?;
    if baseline.len() != rows.len() {
        return Err(LossError::LengthMismatch {
            left: rows.len(),
            right: baseline.len(),
        }
        .into());
    }
    let n = rows.len() as f64;
    let mut reference = Vec::with_capacity(rows.len());
    let mut probs = Vec::with_capacity(rows.len());
    for (x, &p_bl) in rows.iter().zip(baseline) {
        if !(p_bl > 0.0 && p_bl < 1.0) {
            return Err(LossError::Boundary(p_bl).into());
        }
        let r = clamp_prob(p_bl);
        reference.push(r);
        probs.push(postprocess_combine(r, delta.linear_unchecked(x))?);
    }
    let clamped: Vec<f64> = probs.iter().map(|&p| clamp_prob(p)).collect();
    let task = fairloss::mean_bernoulli_kl(&reference, &clamped)?;
    // d KL(r || p) / d z = p - r, zero where the clamp is active
    let mut dz: Vec<f64> = probs
        .iter()
        .zip(&reference)
        .map(|(&p, &r)| if is_unclamped(p) { (p - r) / n } else { 0.0 })
        .collect();
    let fairness = add_fairness_term(&probs, group, majority, lambda, kernel, &mut dz)?;
    let (grad_weights, grad_bias) = backprop(rows, &dz, delta.dimension());
    Ok(LossAndGradient {
        terms: LossTerms {
            task,
            fairness,
            total: task + lambda * fairness.unwrap_or(0.0),
        },
        grad_weights,
        grad_bias,
    })
}

/// A fitted head (or delta model) together with its per-epoch loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: LinearModel,
    pub loss_trace: Vec<LossRecord>,
}

/// Delta model whose output is the logit correction added to the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmfaireningModel {
    pub delta: LinearModel,
}

impl EmfaireningModel {
    pub fn zeros(dimension: usize) -> Self {
        EmfaireningModel {
            delta: LinearModel::zeros(dimension),
        }
    }

    /// Post-processed probability for one instance.
    pub fn apply(&self, p_bl: f64, features: &[f64]) -> Result<f64, TrainError> {
        postprocess_combine(p_bl, self.delta.linear(features)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEmfairening {
    pub model: EmfaireningModel,
    pub loss_trace: Vec<LossRecord>,
}

/// Where the delta model reads its inputs from.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    /// The dataset's own embeddings.
    Dataset,
    /// A separate table, e.g. embeddings from a third-party model.
    Table(&'a EmbeddingTable),
}

impl<'a> Features<'a> {
    pub fn rows<'d>(&self, examples: &'d [Example]) -> Result<Vec<&'d [f64]>, TrainError>
    where
        'a: 'd,
    {
        examples
            .iter()
            .map(|ex| match self {
                Features::Dataset => Ok(ex.embedding.as_slice()),
                Features::Table(table) => table
                    .get(&ex.id)
                    .ok_or_else(|| TrainError::MissingFeatures { id: ex.id.clone() }),
            })
            .collect()
    }

    pub fn dimension(&self, dataset: &Dataset) -> usize {
        match self {
            Features::Dataset => dataset.dimension(),
            Features::Table(table) => table.dimension(),
        }
    }
}

/// Post-processed predictions for `split`.
pub fn postprocess_predictions(
    model: &EmfaireningModel,
    baseline: &HashMap<String, f64>,
    dataset: &Dataset,
    split: Split,
    features: Features<'_>,
) -> Result<HashMap<String, f64>, TrainError> {
    let examples = dataset.split(split);
    let bl = baseline_for(baseline, examples)?;
    let rows = features.rows(examples)?;
    examples
        .iter()
        .zip(rows)
        .zip(bl)
        .map(|((ex, x), p)| Ok((ex.id.clone(), model.apply(p, x)?)))
        .collect()
}

fn baseline_for(baseline: &HashMap<String, f64>, examples: &[Example]) -> Result<Vec<f64>, TrainError> {
    let missing: Vec<String> = examples
        .iter()
        .filter(|ex| !baseline.contains_key(&ex.id))
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(TrainError::BaselineCoverage {
            count: missing.len(),
            sample: missing.into_iter().take(10).collect(),
        });
    }
    Ok(examples.iter().map(|ex| baseline[&ex.id]).collect())
}

/// Per-example conditioning-set membership for the remediated pair.
struct Conditioning {
    group: Vec<bool>,
    majority: Vec<bool>,
}

impl Conditioning {
    fn new(dataset: &Dataset, split: Split, config: &RemediationConfig) -> Result<Self, TrainError> {
        // validates both names against the dataset's known groups
        let n_group = dataset.group_negatives(split, &config.pair.group)?.len();
        let n_majority = dataset.group_negatives(split, &config.pair.majority)?.len();
        if config.lambda > 0.0 {
            if n_group == 0 {
                return Err(TrainError::EmptyConditioningSet {
                    side: "group",
                    name: config.pair.group.clone(),
                });
            }
            if n_majority == 0 {
                return Err(TrainError::EmptyConditioningSet {
                    side: "majority",
                    name: config.pair.majority.clone(),
                });
            }
        }
        let examples = dataset.split(split);
        Ok(Conditioning {
            group: examples
                .iter()
                .map(|ex| !ex.label && ex.in_group(&config.pair.group))
                .collect(),
            majority: examples
                .iter()
                .map(|ex| !ex.label && ex.in_group(&config.pair.majority))
                .collect(),
        })
    }

    fn split_indices(&self, batch: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut group = Vec::new();
        let mut majority = Vec::new();
        for (pos, &i) in batch.iter().enumerate() {
            if self.group[i] {
                group.push(pos);
            }
            if self.majority[i] {
                majority.push(pos);
            }
        }
        (group, majority)
    }

    /// Strided subsample of each conditioning set, for the epoch-end trace.
    fn trace_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |flags: &[bool]| {
            let all: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
            if all.len() <= TRACE_MMD_CAP {
                all
            } else {
                (0..TRACE_MMD_CAP).map(|k| all[k * all.len() / TRACE_MMD_CAP]).collect()
            }
        };
        (pick(&self.group), pick(&self.majority))
    }
}

/// Produces the mini-batches of one epoch.
struct Batcher {
    n: usize,
    batch_size: usize,
    min_per_side: usize,
    stratified: bool,
    pools: [Vec<usize>; 3],
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(conditioning: &Conditioning, config: &RemediationConfig) -> Self {
        let n = conditioning.group.len();
        let mut pools: [Vec<usize>; 3] = Default::default();
        for i in 0..n {
            let pool = if conditioning.group[i] {
                0
            } else if conditioning.majority[i] {
                1
            } else {
                2
            };
            pools[pool].push(i);
        }
        let stratified = config.lambda > 0.0;
        if stratified {
            for (pool, side) in pools.iter().take(2).zip(["group", "majority"]) {
                if pool.len() < config.min_group_negatives_per_batch {
                    log::warn!(
                        "only {} {side} negatives in the training split; batches carry all of them",
                        pool.len()
                    );
                }
            }
        }
        Batcher {
            n,
            batch_size: config.batch_size,
            min_per_side: config.min_group_negatives_per_batch,
            stratified,
            pools,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    fn epoch(&mut self) -> Vec<Vec<usize>> {
        if !self.stratified {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut self.rng);
            return order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        }
        let n_batches = self.n.div_ceil(self.batch_size).max(1);
        let mut batches = vec![Vec::with_capacity(self.batch_size + 2 * self.min_per_side); n_batches];
        for (pool_idx, pool) in self.pools.iter_mut().enumerate() {
            pool.shuffle(&mut self.rng);
            let len = pool.len();
            if len == 0 {
                continue;
            }
            let min = if pool_idx < 2 { self.min_per_side.min(len) } else { 0 };
            for (k, batch) in batches.iter_mut().enumerate() {
                let start = k * len / n_batches;
                let end = (k + 1) * len / n_batches;
                batch.extend_from_slice(&pool[start..end]);
                // top up from the following elements of the shuffled pool, wrapping around
                let have = end - start;
                for offset in 0..min.saturating_sub(have) {
                    batch.push(pool[(end + offset) % len]);
                }
            }
        }
        batches.retain(|b| !b.is_empty());
        batches
    }
}

fn non_finite_at(err: TrainError, step: usize) -> TrainError {
    match err {
        TrainError::Loss(LossError::Boundary(v)) if v.is_nan() => TrainError::NonFinite { step },
        other => other,
    }
}

/// Mini-batch gradient descent shared by both trainers.
fn fit<F>(
    dimension: usize,
    rows: &[&[f64]],
    conditioning: &Conditioning,
    config: &RemediationConfig,
    objective: F,
) -> Result<TrainedModel, TrainError>
where
    F: Fn(&LinearModel, &[&[f64]], &[usize], &[usize], &[usize]) -> Result<LossAndGradient, TrainError>,
{
    let mut model = LinearModel::zeros(dimension);
    let mut batcher = Batcher::new(conditioning, config);
    let all: Vec<usize> = (0..rows.len()).collect();
    let (trace_group, trace_majority) = conditioning.trace_indices();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        for batch in batcher.epoch() {
            let batch_rows: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let (group, majority) = conditioning.split_indices(&batch);
            let eval = objective(&model, &batch_rows, &batch, &group, &majority).map_err(|e| non_finite_at(e, step))?;
            if !eval.terms.total.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            for (w, g) in model.weights.iter_mut().zip(&eval.grad_weights) {
                *w -= config.learning_rate * g;
            }
            model.bias -= config.learning_rate * eval.grad_bias;
            if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
                return Err(TrainError::NonFinite { step });
            }
            step += 1;
        }
        let eval = objective(&model, rows, &all, &trace_group, &trace_majority).map_err(|e| non_finite_at(e, step))?;
        if !eval.terms.total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        trace.push(LossRecord {
            epoch: epoch + 1,
            terms: eval.terms,
        });
    }
    Ok(TrainedModel {
        model,
        loss_trace: trace,
    })
}

/// Fits the logistic-regression head on the train split. With `lambda = 0`
/// this is plain logistic regression.
pub fn train_head(dataset: &Dataset, config: &RemediationConfig) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    let examples = dataset.split(Split::Train);
    if examples.is_empty() {
        return Err(TrainError::EmptySplit { split: Split::Train });
    }
    let conditioning = Conditioning::new(dataset, Split::Train, config)?;
    let rows: Vec<&[f64]> = examples.iter().map(|ex| ex.embedding.as_slice()).collect();
    let labels: Vec<bool> = examples.iter().map(|ex| ex.label).collect();
    fit(
        dataset.dimension(),
        &rows,
        &conditioning,
        config,
        |model, batch_rows, batch, group, majority| {
            let batch_labels: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
            in_processing_loss(
                model,
                batch_rows,
                &batch_labels,
                group,
                majority,
                config.lambda,
                &config.kernel,
            )
        },
    )
}

/// Fits the emfairening delta against a frozen baseline on `split`, reading
/// delta inputs from the dataset's embeddings.
pub fn train_emfairening(
    baseline: &HashMap<String, f64>,
    dataset: &Dataset,
    split: Split,
    config: &RemediationConfig,
) -> Result<TrainedEmfairening, TrainError> {
    train_emfairening_with(baseline, dataset, split, config, Features::Dataset)
}

/// [`train_emfairening`] with an explicit feature source.
pub fn train_emfairening_with(
    baseline: &HashMap<String, f64>,
    dataset: &Dataset,
    split: Split,
    config: &RemediationConfig,
    features: Features<'_>,
) -> Result<TrainedEmfairening, TrainError> {
    config.validate()?;
    let examples = dataset.split(split);
    if examples.is_empty() {
        return Err(TrainError::EmptySplit { split });
    }
    let baseline_probs = baseline_for(baseline, examples)?;
    let conditioning = Conditioning::new(dataset, split, config)?;
    let rows = features.rows(examples)?;
    let trained = fit(
        features.dimension(dataset),
        &rows,
        &conditioning,
        config,
        |model, batch_rows, batch, group, majority| {
            let bl: Vec<f64> = batch.iter().map(|&i| baseline_probs[i]).collect();
            post_processing_loss(model, batch_rows, &bl, group, majority, config.lambda, &config.kernel)
        },
    )?;
    Ok(TrainedEmfairening {
        model: EmfaireningModel { delta: trained.model },
        loss_trace: trained.loss_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Head,
    Emfairening,
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub kind: ModelKind,
    pub dimension: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: RemediationConfig,
    pub loss_trace: Vec<LossRecord>,
}

impl ModelDocument {
    pub fn new(kind: ModelKind, model: &LinearModel, config: &RemediationConfig, loss_trace: &[LossRecord]) -> Self {
        ModelDocument {
            kind,
            dimension: model.dimension(),
            weights: model.weights.clone(),
            bias: model.bias,
            config: config.clone(),
            loss_trace: loss_trace.to_vec(),
        }
    }

    pub fn model(&self) -> Result<LinearModel, TrainError> {
        if self.weights.len() != self.dimension {
            return Err(TrainError::Dimension {
                expected: self.dimension,
                found: self.weights.len(),
            });
        }
        Ok(LinearModel {
            weights: self.weights.clone(),
            bias: self.bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("model documents always serialize");
        fs::write(path, text).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let io = |message: String| TrainError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}
