//! Experiment orchestration: synthetic data with a planted FPR gap, lambda
//! sweeps for both remediation methods, Pareto frontiers, model-transfer runs,
//! prompt-variant evaluation and report files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, EmbeddingTable, Example, GroupConfig, GroupPair, Split};
use crate::fairloss::{clamp_prob, logit, sigmoid};
use crate::metrics::{self, EvalReport, MetricsError, DEFAULT_THRESHOLD};
use crate::prompting::{self, wrap_prompt, PromptError, PromptVariant, ScorerBinding, ScorerError};
use crate::training::{
    self, postprocess_predictions, predict_split, train_emfairening_with, Features, ModelDocument, ModelKind,
    RemediationConfig, TrainError,
};

/// Lambda grid used when a sweep config does not list one.
pub const DEFAULT_LAMBDAS: [f64; 8] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0];

/// How the fairness penalty enters both losses; recorded in every manifest.
pub const FAIRNESS_TERM: &str = "lambda * squared MMD (biased V-statistic, Gaussian kernel on predicted probabilities)";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sweep failed at lambda = {lambda}: {source}")]
    Lambda {
        lambda: f64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{side} does not cover {count} ids, e.g. {sample:?}")]
    Coverage {
        side: &'static str,
        count: usize,
        sample: Vec<String>,
    },
    #[error("variant {variant}: {source}")]
    Variant {
        variant: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("instance {id} has no text to prompt with")]
    MissingText { id: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl HarnessError {
    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    /// Whether the failure comes from bad input rather than from running it.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Config(_)
            | HarnessError::Dataset(_)
            | HarnessError::Coverage { .. }
            | HarnessError::MissingText { .. }
            | HarnessError::Prompt(_) => true,
            HarnessError::Train(e) => matches!(
                e,
                TrainError::Config(_)
                    | TrainError::Dimension { .. }
                    | TrainError::EmptySplit { .. }
                    | TrainError::EmptyConditioningSet { .. }
                    | TrainError::BaselineCoverage { .. }
                    | TrainError::MissingFeatures { .. }
                    | TrainError::Dataset(_)
            ),
            HarnessError::Metrics(e) => matches!(
                e,
                MetricsError::Coverage { .. } | MetricsError::Threshold(_) | MetricsError::Dataset(_)
            ),
            HarnessError::Scorer(e) => matches!(e, ScorerError::InvalidBinding(_) | ScorerError::MissingIds { .. }),
            HarnessError::Lambda { source, .. } | HarnessError::Variant { source, .. } => source.is_validation(),
            HarnessError::Io { .. } => false,
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic data

/// Parameters of the planted-bias generator.
///
/// Each example belongs to exactly one of two groups. The label is
/// `Bernoulli(prevalence)` where the group's prevalence is raised so that a
/// calibrated logistic head, thresholded at 0.5, has an FPR on the group that
/// is `planted_ratio` times the majority's. Embeddings carry the class signal
/// on coordinate 0 (`N(+-separation, 1)`), group membership on coordinate 1
/// (`N(group_shift * g, group_noise^2)`) and unit Gaussian noise elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub n_validation: usize,
    pub dimension: usize,
    #[serde(default = "default_group_fraction")]
    pub group_fraction: f64,
    pub planted_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prevalence")]
    pub majority_prevalence: f64,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default = "default_group_shift")]
    pub group_shift: f64,
    /// Standard deviation of the noise on the group coordinate.
    #[serde(default = "default_group_noise")]
    pub group_noise: f64,
    #[serde(default = "default_group_name")]
    pub group_name: String,
    #[serde(default = "default_majority_name")]
    pub majority_name: String,
}

fn default_group_fraction() -> f64 {
    0.25
}
fn default_prevalence() -> f64 {
    0.3
}
fn default_separation() -> f64 {
    1.0
}
fn default_group_shift() -> f64 {
    1.0
}
fn default_group_noise() -> f64 {
    0.25
}
fn default_group_name() -> String {
    "group".into()
}
fn default_majority_name() -> String {
    "majority".into()
}

impl SyntheticSpec {
    pub fn new(n_train: usize, n_test: usize, dimension: usize, planted_ratio: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_train,
            n_test,
            n_validation: 0,
            dimension,
            group_fraction: default_group_fraction(),
            planted_ratio,
            seed,
            majority_prevalence: default_prevalence(),
            class_separation: default_separation(),
            group_shift: default_group_shift(),
            group_noise: default_group_noise(),
            group_name: default_group_name(),
            majority_name: default_majority_name(),
        }
    }

    /// The fixture used by the end-to-end acceptance checks.
    pub fn acceptance() -> Self {
        SyntheticSpec::new(20_000, 5_000, 16, 2.0, 7)
    }

    pub fn pair(&self) -> GroupPair {
        GroupPair {
            group: self.group_name.clone(),
            majority: self.majority_name.clone(),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.dimension < 2 {
            return bad(format!("dimension must be at least 2, got {}", self.dimension));
        }
        if !(self.group_fraction > 0.0 && self.group_fraction < 1.0) {
            return bad(format!(
                "group_fraction must lie in (0, 1), got {}",
                self.group_fraction
            ));
        }
        if !(self.planted_ratio >= 1.0 && self.planted_ratio.is_finite()) {
            return bad(format!("planted_ratio must be >= 1, got {}", self.planted_ratio));
        }
        if !(self.majority_prevalence > 0.0 && self.majority_prevalence < 1.0) {
            return bad("majority_prevalence must lie in (0, 1)".into());
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.class_separation)
            || !positive(self.group_noise)
            || !(self.group_shift.is_finite() && self.group_shift >= 0.0)
        {
            return bad("class_separation and group_noise must be positive, group_shift non-negative".into());
        }
        if self.group_name == self.majority_name {
            return bad("group and majority names must differ".into());
        }
        for (name, n) in [("train", self.n_train), ("test", self.n_test)] {
            let group = self.group_fraction * n as f64;
            let majority = (1.0 - self.group_fraction) * n as f64;
            if group < 10.0 || majority < 10.0 {
                return bad(format!(
                    "degenerate {name} split: expected {group:.1} group and {majority:.1} majority examples (need >= 10 each)"
                ));
            }
        }
        Ok(())
    }

    /// Closed-form targets of the generator under a calibrated head.
    pub fn analytic(&self) -> Result<SyntheticAnalytic, HarnessError> {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let mu = self.class_separation;
        // Bayes logit: 2 * mu * x0 + logit(prevalence); positive iff x0 >= -b / (2 mu).
        // Negatives have x0 ~ N(-mu, 1), so FPR = 1 - Phi(mu - b / (2 mu)).
        let fpr_at = |b: f64| 1.0 - normal.cdf(mu - b / (2.0 * mu));
        let b_majority = (self.majority_prevalence / (1.0 - self.majority_prevalence)).ln();
        let fpr_majority = fpr_at(b_majority);
        let fpr_group = self.planted_ratio * fpr_majority;
        if fpr_group >= 1.0 {
            return Err(HarnessError::Config(format!(
                "planted_ratio {} is unreachable: majority FPR is {fpr_majority:.4}",
                self.planted_ratio
            )));
        }
        // solve 1 - Phi(mu - b / (2 mu)) = fpr_group for b
        let b_group = 2.0 * mu * (mu - normal.inverse_cdf(1.0 - fpr_group));
        Ok(SyntheticAnalytic {
            group_prevalence: sigmoid(b_group),
            majority_prevalence: self.majority_prevalence,
            fpr_group,
            fpr_majority,
            planted_ratio: self.planted_ratio,
            decision_x0_group: -b_group / (2.0 * mu),
            decision_x0_majority: -b_majority / (2.0 * mu),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAnalytic {
    pub group_prevalence: f64,
    pub majority_prevalence: f64,
    pub fpr_group: f64,
    pub fpr_majority: f64,
    pub planted_ratio: f64,
    pub decision_x0_group: f64,
    pub decision_x0_majority: f64,
}

/// Generates a dataset with a planted FPR gap between the two groups.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let analytic = spec.analytic()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut splits = BTreeMap::new();
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Validation, spec.n_validation),
        (Split::Test, spec.n_test),
    ] {
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let in_group = rng.random_bool(spec.group_fraction);
            let prevalence = if in_group {
                analytic.group_prevalence
            } else {
                analytic.majority_prevalence
            };
            let label = rng.random_bool(prevalence);
            let mut embedding = Vec::with_capacity(spec.dimension);
            let noise = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
            let sign = if label { 1.0 } else { -1.0 };
            embedding.push(sign * spec.class_separation + noise(&mut rng));
            embedding.push(if in_group { spec.group_shift } else { 0.0 } + spec.group_noise * noise(&mut rng));
            for _ in 2..spec.dimension {
                embedding.push(noise(&mut rng));
            }
            let id = format!("{}-{:06}", split.as_str(), i);
            examples.push(Example {
                text: Some(format!("synthetic comment {id}")),
                id,
                embedding,
                label,
                groups: [if in_group {
                    spec.group_name.clone()
                } else {
                    spec.majority_name.clone()
                }]
                .into(),
                baseline_prob: None,
            });
        }
        splits.insert(split, examples);
    }
    let metadata = serde_json::json!({
        "generator": "planted_fpr_gap",
        "spec": spec,
        "analytic": analytic,
    });
    Ok(Dataset::new(spec.dimension, splits, GroupConfig::new(vec![spec.pair()])?)?.with_metadata(metadata))
}

/// A stand-in for an external embedder: a seeded random linear projection of
/// every embedding to `dimension` coordinates plus Gaussian noise of scale
/// `noise`. Projection entries are `N(0, 1 / source dimension)`.
pub fn project_embeddings(
    dataset: &Dataset,
    dimension: usize,
    noise: f64,
    seed: u64,
) -> Result<EmbeddingTable, HarnessError> {
    if dimension == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(HarnessError::Config(format!(
            "projection needs dimension > 0 and finite noise >= 0, got {dimension} and {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = dataset.dimension();
    let scale = 1.0 / (source.max(1) as f64).sqrt();
    let projection: Vec<Vec<f64>> = (0..dimension)
        .map(|_| {
            (0..source)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut table = EmbeddingTable::new(dimension);
    for ex in dataset.examples() {
        let row = projection
            .iter()
            .map(|w| {
                let dot: f64 = w.iter().zip(&ex.embedding).map(|(a, b)| a * b).sum();
                dot + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        table.insert(ex.id.clone(), row)?;
    }
    Ok(table)
}

/// `sigmoid(temperature * logit(p) + offset)` applied to every prediction.
pub fn recalibrate(baseline: &HashMap<String, f64>, temperature: f64, offset: f64) -> HashMap<String, f64> {
    baseline
        .iter()
        .map(|(id, &p)| {
            let z = logit(clamp_prob(p)).expect("clamped probabilities are interior");
            (id.clone(), sigmoid(temperature * z + offset))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sweeps and frontiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    InProcessing,
    PostProcessing,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::InProcessing => "in_processing",
            Method::PostProcessing => "post_processing",
        }
    }
}

fn default_lambdas() -> Vec<f64> {
    DEFAULT_LAMBDAS.to_vec()
}
fn default_eval_split() -> Split {
    Split::Test
}
fn default_train_split() -> Split {
    Split::Train
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SweepConfigDoc")]
pub struct SweepConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    pub method: Method,
    pub pair: GroupPair,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    /// Split the remediation is fitted on.
    #[serde(default = "default_train_split")]
    pub train_split: Split,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Template for every point; its `lambda` and `pair` are overridden.
    pub base: RemediationConfig,
}

/// Document form of [`SweepConfig`]: `base` may omit its pair, or be absent.
#[derive(Deserialize)]
struct SweepConfigDoc {
    #[serde(default = "default_lambdas")]
    lambdas: Vec<f64>,
    method: Method,
    pair: GroupPair,
    #[serde(default = "default_eval_split")]
    eval_split: Split,
    #[serde(default = "default_train_split")]
    train_split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default)]
    base: Option<serde_json::Value>,
}

impl TryFrom<SweepConfigDoc> for SweepConfig {
    type Error = String;

    fn try_from(doc: SweepConfigDoc) -> Result<Self, Self::Error> {
        let mut base = match doc.base {
            Some(serde_json::Value::Object(map)) => map,
            Some(other) => return Err(format!("base must be a table, got {other}")),
            None => Default::default(),
        };
        base.entry("pair")
            .or_insert_with(|| serde_json::to_value(&doc.pair).expect("pairs serialize"));
        let base: RemediationConfig =
            serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| format!("base: {e}"))?;
        Ok(SweepConfig {
            lambdas: doc.lambdas,
            method: doc.method,
            pair: doc.pair,
            eval_split: doc.eval_split,
            train_split: doc.train_split,
            threshold: doc.threshold,
            base,
        })
    }
}

impl SweepConfig {
    pub fn new(method: Method, pair: GroupPair, lambdas: Vec<f64>) -> Self {
        SweepConfig {
            lambdas,
            method,
            base: RemediationConfig::new(pair.clone()),
            pair,
            eval_split: default_eval_split(),
            train_split: default_train_split(),
            threshold: default_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.lambdas.is_empty() {
            return bad("lambdas must not be empty".into());
        }
        if !self.lambdas.contains(&0.0) {
            return bad("lambdas must include 0 (the unremediated point)".into());
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambdas must be finite and >= 0: {:?}", self.lambdas));
        }
        if self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lambdas must be strictly increasing: {:?}", self.lambdas));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        self.pair.validate()?;
        self.config_for(0.0).validate()?;
        Ok(())
    }

    /// The remediation config of the point at `lambda`.
    pub fn config_for(&self, lambda: f64) -> RemediationConfig {
        RemediationConfig {
            lambda,
            pair: self.pair.clone(),
            ..self.base.clone()
        }
    }

    fn group_config(&self) -> GroupConfig {
        GroupConfig {
            pairs: vec![self.pair.clone()],
        }
    }
}

/// One (performance, fairness) measurement of a remediated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub auc: f64,
    pub fpr_group: Option<f64>,
    pub fpr_majority: Option<f64>,
    pub fpr_ratio: Option<f64>,
    /// |ln(fpr_ratio)|, infinite when the ratio is undefined.
    pub unfairness: f64,
    pub method: String,
}

impl ParetoPoint {
    pub fn from_report(lambda: f64, method: &str, report: &EvalReport, pair: &GroupPair) -> Self {
        let row = report
            .row(&pair.group, &pair.majority)
            .expect("report evaluated on this pair");
        ParetoPoint {
            lambda,
            auc: report.auc,
            fpr_group: row.fpr_group,
            fpr_majority: row.fpr_majority,
            fpr_ratio: row.fpr_ratio,
            unfairness: row.unfairness(),
            method: method.to_string(),
        }
    }

    /// The lambda = 0 point is the unremediated model.
    pub fn is_unremediated(&self) -> bool {
        self.lambda == 0.0
    }

    fn dominates(&self, other: &ParetoPoint) -> bool {
        self.auc >= other.auc
            && self.unfairness <= other.unfairness
            && (self.auc > other.auc || self.unfairness < other.unfairness)
    }
}

/// A sweep point together with the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub point: ParetoPoint,
    pub report: EvalReport,
    pub model: ModelDocument,
}

fn run_point(
    dataset: &Dataset,
    config: &SweepConfig,
    lambda: f64,
    baseline: Option<&HashMap<String, f64>>,
) -> Result<SweepResult, HarnessError> {
    let remediation = config.config_for(lambda);
    let (predictions, model) = match config.method {
        Method::InProcessing => {
            let trained = training::train_head(dataset, &remediation)?;
            let preds = predict_split(&trained.model, dataset, config.eval_split)?;
            let doc = ModelDocument::new(ModelKind::Head, &trained.model, &remediation, &trained.loss_trace);
            (preds, doc)
        }
        Method::PostProcessing => {
            let baseline = baseline
                .ok_or_else(|| HarnessError::Config("post-processing sweeps need baseline predictions".into()))?;
            let trained =
                train_emfairening_with(baseline, dataset, config.train_split, &remediation, Features::Dataset)?;
            let preds =
                postprocess_predictions(&trained.model, baseline, dataset, config.eval_split, Features::Dataset)?;
            let doc = ModelDocument::new(
                ModelKind::Emfairening,
                &trained.model.delta,
                &remediation,
                &trained.loss_trace,
            );
            (preds, doc)
        }
    };
    let report = metrics::evaluate(
        dataset,
        config.eval_split,
        &predictions,
        &config.group_config(),
        config.threshold,
    )?;
    Ok(SweepResult {
        point: ParetoPoint::from_report(lambda, config.method.as_str(), &report, &config.pair),
        report,
        model,
    })
}

/// Full train + evaluate cycle per lambda, run concurrently, returned in
/// lambda order.
pub fn sweep_with_models(
    dataset: &Dataset,
    config: &SweepConfig,
    baseline: Option<&HashMap<String, f64>>,
) -> Result<Vec<SweepResult>, HarnessError> {
    config.validate()?;
    if config.method == Method::PostProcessing {
        let baseline =
            baseline.ok_or_else(|| HarnessError::Config("post-processing sweeps need baseline predictions".into()))?;
        for split in [config.train_split, config.eval_split] {
            check_coverage("baseline", baseline, dataset.split(split))?;
        }
    }
    config
        .lambdas
        .par_iter()
        .map(|&lambda| {
            run_point(dataset, config, lambda, baseline).map_err(|e| HarnessError::Lambda {
                lambda,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn sweep(
    dataset: &Dataset,
    config: &SweepConfig,
    baseline: Option<&HashMap<String, f64>>,
) -> Result<Vec<ParetoPoint>, HarnessError> {
    Ok(sweep_with_models(dataset, config, baseline)?
        .into_iter()
        .map(|r| r.point)
        .collect())
}

/// Non-dominated points under (maximize AUC, minimize unfairness), sorted by
/// AUC descending. Points with identical coordinates are kept once.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut unique: Vec<&ParetoPoint> = Vec::with_capacity(points.len());
    for p in points {
        if !unique.iter().any(|q| q.auc == p.auc && q.unfairness == p.unfairness) {
            unique.push(p);
        }
    }
    let mut frontier: Vec<ParetoPoint> = unique
        .iter()
        .filter(|p| !unique.iter().any(|q| q.dominates(p)))
        .map(|p| (*p).clone())
        .collect();
    frontier.sort_by(|a, b| {
        b.auc
            .total_cmp(&a.auc)
            .then(a.unfairness.total_cmp(&b.unfairness))
            .then(a.lambda.total_cmp(&b.lambda))
    });
    frontier
}

fn check_coverage(side: &'static str, map: &HashMap<String, f64>, examples: &[Example]) -> Result<(), HarnessError> {
    let missing: Vec<String> = examples
        .iter()
        .filter(|ex| !map.contains_key(&ex.id))
        .map(|ex| ex.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Coverage {
            side,
            count: missing.len(),
            sample: missing.into_iter().take(10).collect(),
        })
    }
}

/// Native and transferred frontiers of a post-processing model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub native: Vec<ParetoPoint>,
    pub transfer: Vec<ParetoPoint>,
}

/// Fits an emfairening model per lambda against `source` (inputs from
/// `embeddings`) and evaluates it on top of both `source` and `target`.
pub fn transfer_experiment(
    source: &HashMap<String, f64>,
    target: &HashMap<String, f64>,
    embeddings: &EmbeddingTable,
    dataset: &Dataset,
    config: &SweepConfig,
) -> Result<TransferOutcome, HarnessError> {
    config.validate()?;
    for split in [config.train_split, config.eval_split] {
        check_coverage("source baseline", source, dataset.split(split))?;
        let missing: Vec<String> = dataset
            .split(split)
            .iter()
            .filter(|ex| embeddings.get(&ex.id).is_none())
            .map(|ex| ex.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(HarnessError::Coverage {
                side: "embedding table",
                count: missing.len(),
                sample: missing.into_iter().take(10).collect(),
            });
        }
    }
    check_coverage("target baseline", target, dataset.split(config.eval_split))?;
    let features = Features::Table(embeddings);
    let groups = config.group_config();
    let pairs: Vec<(ParetoPoint, ParetoPoint)> = config
        .lambdas
        .par_iter()
        .map(|&lambda| -> Result<_, HarnessError> {
            let run = || -> Result<_, HarnessError> {
                let remediation = config.config_for(lambda);
                let trained = train_emfairening_with(source, dataset, config.train_split, &remediation, features)?;
                let mut points = Vec::with_capacity(2);
                for (name, baseline) in [("native", source), ("transfer", target)] {
                    let preds =
                        postprocess_predictions(&trained.model, baseline, dataset, config.eval_split, features)?;
                    let report = metrics::evaluate(dataset, config.eval_split, &preds, &groups, config.threshold)?;
                    points.push(ParetoPoint::from_report(lambda, name, &report, &config.pair));
                }
                let transfer = points.pop().expect("two points");
                let native = points.pop().expect("two points");
                Ok((native, transfer))
            };
            run().map_err(|e| HarnessError::Lambda {
                lambda,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    let (native, transfer) = pairs.into_iter().unzip();
    Ok(TransferOutcome { native, transfer })
}

/// Scores every example of `split` under each prompt variant and evaluates the
/// resulting probabilities. Score ids are `<variant key>:<example id>`, so one
/// cache file can hold several variants.
pub fn evaluate_prompt_variants(
    dataset: &Dataset,
    split: Split,
    binding: &ScorerBinding,
    variants: &[PromptVariant],
    config: &GroupConfig,
    threshold: f64,
) -> Result<BTreeMap<String, EvalReport>, HarnessError> {
    let mut reports = BTreeMap::new();
    for variant in variants {
        let key = variant.key();
        let run = || -> Result<EvalReport, HarnessError> {
            let examples = dataset.split(split);
            let mut prompts = Vec::with_capacity(examples.len());
            for ex in examples {
                let text = ex
                    .text
                    .as_deref()
                    .ok_or_else(|| HarnessError::MissingText { id: ex.id.clone() })?;
                prompts.push((format!("{key}:{}", ex.id), wrap_prompt(text, variant)?));
            }
            let scores = prompting::fetch_scores(binding, &prompts)?;
            let mut probs = HashMap::with_capacity(examples.len());
            for ex in examples {
                let (p_pos, _) = prompting::scores_to_probs(scores[&format!("{key}:{}", ex.id)])?;
                probs.insert(ex.id.clone(), p_pos);
            }
            Ok(metrics::evaluate(dataset, split, &probs, config, threshold)?)
        };
        let report = run().map_err(|e| HarnessError::Variant {
            variant: key.clone(),
            source: Box::new(e),
        })?;
        reports.insert(key, report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// prediction files

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    prob: f64,
}

/// Writes `{id, prob}` JSON lines sorted by id.
pub fn write_predictions(path: &Path, predictions: &HashMap<String, f64>) -> Result<(), HarnessError> {
    let mut ids: Vec<&String> = predictions.keys().collect();
    ids.sort();
    let mut text = String::with_capacity(ids.len() * 32);
    for id in ids {
        let line = serde_json::to_string(&PredictionRecord {
            id: id.clone(),
            prob: predictions[id],
        })
        .expect("records always serialize");
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Reads a file written by [`write_predictions`]. Every probability must lie in [0, 1].
pub fn read_predictions(path: &Path) -> Result<HashMap<String, f64>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| HarnessError::Config(format!("{}:{}: {m}", path.display(), idx + 1));
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.prob) {
            return Err(bad(format!(
                "probability {} for {} is outside [0, 1]",
                rec.prob, rec.id
            )));
        }
        if out.insert(rec.id.clone(), rec.prob).is_some() {
            return Err(bad(format!("duplicate id {}", rec.id)));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reports

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub fairness_term: String,
    pub seeds: Vec<u64>,
    pub configs: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seeds: Vec<u64>, configs: serde_json::Value) -> Self {
        let mut seeds = seeds;
        seeds.sort_unstable();
        seeds.dedup();
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            fairness_term: FAIRNESS_TERM.to_string(),
            seeds,
            configs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub sweep: PathBuf,
    pub frontier: PathBuf,
    pub groups: PathBuf,
    pub manifest: PathBuf,
}

const POINT_HEADER: [&str; 7] = [
    "lambda",
    "auc",
    "fpr_group",
    "fpr_majority",
    "fpr_ratio",
    "unfairness",
    "method",
];

const GROUP_HEADER: [&str; 11] = [
    "report",
    "split",
    "threshold",
    "auc",
    "group",
    "majority",
    "fpr_group",
    "fpr_majority",
    "fpr_ratio",
    "n_negatives_group",
    "n_negatives_majority",
];

/// Serializes points as CSV text (header always present).
pub fn points_to_csv(points: &[ParetoPoint]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(POINT_HEADER).expect("in-memory write");
    for p in points {
        w.serialize(p).expect("points always serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

pub fn points_from_csv(text: &str) -> Result<Vec<ParetoPoint>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

pub fn read_points_csv(path: &Path) -> Result<Vec<ParetoPoint>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    points_from_csv(&text).map_err(|e| HarnessError::io(path, e))
}

fn groups_to_csv(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(GROUP_HEADER).expect("in-memory write");
    for (name, report) in reports {
        for row in report.csv_rows(name) {
            w.serialize(row).expect("rows always serialize");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Writes `sweep.csv`, `frontier.csv`, `groups.csv` and `manifest.json` into `dir`.
pub fn emit_report(
    points: &[ParetoPoint],
    reports: &BTreeMap<String, EvalReport>,
    manifest: &RunManifest,
    dir: &Path,
) -> Result<ReportFiles, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let files = ReportFiles {
        sweep: dir.join("sweep.csv"),
        frontier: dir.join("frontier.csv"),
        groups: dir.join("groups.csv"),
        manifest: dir.join("manifest.json"),
    };
    // one frontier per method
    let mut frontier = Vec::new();
    let mut methods: Vec<&str> = points.iter().map(|p| p.method.as_str()).collect();
    methods.dedup();
    let mut seen = Vec::new();
    for m in methods {
        if seen.contains(&m) {
            continue;
        }
        seen.push(m);
        let subset: Vec<ParetoPoint> = points.iter().filter(|p| p.method == m).cloned().collect();
        frontier.extend(pareto_frontier(&subset));
    }
    let write = |path: &Path, text: String| fs::write(path, text).map_err(|e| HarnessError::io(path, e));
    write(&files.sweep, points_to_csv(points))?;
    write(&files.frontier, points_to_csv(&frontier))?;
    write(&files.groups, groups_to_csv(reports))?;
    write(
        &files.manifest,
        serde_json::to_string_pretty(manifest).expect("manifests always serialize"),
    )?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lambda: f64, auc: f64, unfairness: f64) -> ParetoPoint {
        ParetoPoint {
            lambda,
            auc,
            fpr_group: None,
            fpr_majority: None,
            fpr_ratio: Some(unfairness.exp()),
            unfairness,
            method: "m".into(),
        }
    }

    // Exhaustive pairwise dominance check, independent of pareto_frontier.
    fn frontier_oracle(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for p in points {
            let mut dominated = false;
            for q in points {
                let weakly = q.auc >= p.auc && q.unfairness <= p.unfairness;
                let strictly = q.auc > p.auc || q.unfairness < p.unfairness;
                if weakly && strictly {
                    dominated = true;
                }
            }
            if !dominated && !out.contains(&(p.auc, p.unfairness)) {
                out.push((p.auc, p.unfairness));
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
        out
    }

    fn coords(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
        points.iter().map(|p| (p.auc, p.unfairness)).collect()
    }

    #[test]
    fn frontier_examples() {
        let pts = [pt(0.0, 0.9, 0.5), pt(1.0, 0.85, 0.2), pt(2.0, 0.8, 0.3)];
        let f = pareto_frontier(&pts);
        assert_eq!(coords(&f), [(0.9, 0.5), (0.85, 0.2)]);
        assert_eq!(coords(&f), frontier_oracle(&pts));

        assert_eq!(pareto_frontier(&[pt(0.0, 0.7, 0.1)]).len(), 1);
        let dup = [pt(0.0, 0.7, 0.1), pt(1.0, 0.7, 0.1)];
        let f = pareto_frontier(&dup);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].lambda, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn frontier_matches_oracle_and_is_idempotent(
            raw in proptest::collection::vec((0u8..10, 0u8..10), 1..40),
        ) {
            let pts: Vec<ParetoPoint> = raw
                .iter()
                .enumerate()
                .map(|(i, &(a, u))| pt(i as f64, a as f64 / 10.0, u as f64 / 10.0))
                .collect();
            let f = pareto_frontier(&pts);
            proptest::prop_assert_eq!(coords(&f), frontier_oracle(&pts));
            proptest::prop_assert_eq!(pareto_frontier(&f), f.clone());
            for p in &f {
                proptest::prop_assert!(pts.contains(p));
            }
        }
    }

    #[test]
    fn sweep_config_validation() {
        let pair = GroupPair::new("g", "m").unwrap();
        let ok = SweepConfig::new(Method::InProcessing, pair.clone(), vec![0.0, 1.0]);
        assert!(ok.validate().is_ok());
        for lambdas in [
            vec![],
            vec![1.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 2.0, 1.0],
            vec![0.0, f64::NAN],
        ] {
            let c = SweepConfig::new(Method::InProcessing, pair.clone(), lambdas);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn sweep_documents_inherit_the_pair() {
        let c: SweepConfig = serde_json::from_str(
            r#"{"method": "post_processing", "pair": {"group": "g", "majority": "m"}, "base": {"epochs": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.base.pair, c.pair);
        assert_eq!(c.base.epochs, 3);
        assert_eq!(c.lambdas, DEFAULT_LAMBDAS);
        let bare: SweepConfig =
            serde_json::from_str(r#"{"method": "in_processing", "pair": {"group": "g", "majority": "m"}}"#).unwrap();
        assert_eq!(
            bare,
            SweepConfig::new(
                Method::InProcessing,
                GroupPair::new("g", "m").unwrap(),
                DEFAULT_LAMBDAS.to_vec()
            )
        );
        let back: SweepConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn synthetic_validation() {
        let mut s = SyntheticSpec::new(100, 100, 4, 2.0, 1);
        assert!(gen_synthetic(&s).is_ok());
        s.group_fraction = 0.05;
        assert!(matches!(gen_synthetic(&s), Err(HarnessError::Config(_))));
        let s = SyntheticSpec::new(100, 100, 4, 0.5, 1);
        assert!(gen_synthetic(&s).is_err());
        let s = SyntheticSpec::new(100, 100, 4, 50.0, 1);
        assert!(gen_synthetic(&s).is_err());
    }

    #[test]
    fn analytic_targets_hit_planted_ratio() {
        let spec = SyntheticSpec::acceptance();
        let a = spec.analytic().unwrap();
        assert!((a.fpr_group / a.fpr_majority - 2.0).abs() < 1e-12);
        assert!(a.group_prevalence > a.majority_prevalence);
        // independent check of the majority rate: P(N(-mu,1) >= boundary)
        let normal = Normal::new(-spec.class_separation, 1.0).unwrap();
        let expected = 1.0 - normal.cdf(a.decision_x0_majority);
        assert!((a.fpr_majority - expected).abs() < 1e-12);
        let expected_g = 1.0 - normal.cdf(a.decision_x0_group);
        assert!((a.fpr_group - expected_g).abs() < 1e-9);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(300, 200, 5, 2.0, 42);
        let a = serde_json::to_vec(&gen_synthetic(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&gen_synthetic(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(a, serde_json::to_vec(&gen_synthetic(&other).unwrap()).unwrap());
    }

    #[test]
    fn csv_round_trip_preserves_frontier() {
        let mut pts = vec![pt(0.0, 0.9, 0.5), pt(0.1, 0.85, 0.2), pt(1.0, 0.8, 0.3)];
        pts.push(ParetoPoint {
            fpr_ratio: None,
            unfairness: f64::INFINITY,
            ..pt(3.0, 0.7, 0.0)
        });
        let text = points_to_csv(&pts);
        let back = points_from_csv(&text).unwrap();
        assert_eq!(back, pts);
        assert_eq!(pareto_frontier(&back), pareto_frontier(&pts));
        assert_eq!(points_to_csv(&[]).trim_end(), POINT_HEADER.join(","));
    }

    #[test]
    fn prediction_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let m: HashMap<String, f64> = [("b".to_string(), 0.25), ("a".to_string(), 1.0 / 3.0)].into();
        write_predictions(&path, &m).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"id\":\"a\""));

        fs::write(&path, "{\"id\":\"a\",\"prob\":1.5}\n").unwrap();
        assert!(matches!(read_predictions(&path), Err(HarnessError::Config(_))));
        fs::write(&path, "{\"id\":\"a\",\"prob\":0.1}\n{\"id\":\"a\",\"prob\":0.2}\n").unwrap();
        assert!(read_predictions(&path).is_err());
    }

    #[test]
    fn recalibrate_identity() {
        let m: HashMap<String, f64> = [("a".to_string(), 0.3), ("b".to_string(), 0.9)].into();
        let same = recalibrate(&m, 1.0, 0.0);
        for (k, v) in &m {
            assert!((same[k] - v).abs() < 1e-12);
        }
    }
}
