//! Equality-of-opportunity metrics (false positive rates and their ratio to a
//! designated majority group) and ROC AUC.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, GroupConfig, Split};

/// Default decision threshold on the probability scale.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Above this many instances `roc_auc` switches from pair counting to ranks.
pub const PAIRWISE_AUC_LIMIT: usize = 10_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("false positive rate is undefined without negative instances")]
    NoNegatives,
    #[error("FPR ratio undefined: majority FPR is zero (group FPR {fpr_group})")]
    UndefinedRatio { fpr_group: f64, fpr_majority: f64 },
    #[error("ROC AUC needs both classes ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    Threshold(f64),
    #[error("predictions missing for {count} ids in split {split}, e.g. {sample:?}")]
    Coverage {
        split: Split,
        count: usize,
        sample: Vec<String>,
    },
    #[error("prediction for {id} is not a probability: {value}")]
    NotAProbability { id: String, value: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot write report {path}: {message}")]
    Write { path: String, message: String },
}

/// Fraction of label-0 instances predicted positive (`prediction >= threshold`).
pub fn fpr(predictions: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut negatives = 0usize;
    let mut false_positives = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if !y {
            negatives += 1;
            if p >= threshold {
                false_positives += 1;
            }
        }
    }
    if negatives == 0 {
        return Err(MetricsError::NoNegatives);
    }
    Ok(false_positives as f64 / negatives as f64)
}

/// FPR of a group divided by the FPR of its majority group; 1.0 is parity.
pub fn fpr_ratio(fpr_group: f64, fpr_majority: f64) -> Result<f64, MetricsError> {
    if fpr_majority.is_nan() || fpr_majority <= 0.0 {
        return Err(MetricsError::UndefinedRatio {
            fpr_group,
            fpr_majority,
        });
    }
    Ok(fpr_group / fpr_majority)
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let positives = labels.iter().filter(|&&y| y).count();
    (positives, labels.len() - positives)
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() <= PAIRWISE_AUC_LIMIT {
        roc_auc_pairwise(scores, labels)
    } else {
        roc_auc_ranked(scores, labels)
    }
}

fn check_auc_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: scores.len(),
            labels: labels.len(),
        });
    }
    let (positives, negatives) = class_counts(labels);
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Exact count over all (positive, negative) pairs.
pub fn roc_auc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_auc_input(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| !y)
        .map(|(&s, _)| s)
        .collect();
    // doubled counts keep the accumulation in integers
    let mut twice_wins: u64 = 0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                twice_wins += 2;
            } else if sp == sn {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Rank-sum form with midranks for ties; O(n log n).
pub fn roc_auc_ranked(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_auc_input(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // sum of doubled midranks of positives: tie block [start, end) has midrank (start + end + 1) / 2
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += pos_in_block * (start + end + 1) as u128;
        start = end;
    }
    let np = positives as u128;
    // U = R - np(np+1)/2, doubled
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// FPRs for one (group, majority) pair. Rates and ratio are `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsRow {
    pub group: String,
    pub majority: String,
    pub fpr_group: Option<f64>,
    pub fpr_majority: Option<f64>,
    pub fpr_ratio: Option<f64>,
    pub n_negatives_group: usize,
    pub n_negatives_majority: usize,
}

impl GroupMetricsRow {
    pub fn is_defined(&self) -> bool {
        self.fpr_ratio.is_some()
    }

    /// |ln(fpr_ratio)|, infinite when the ratio is undefined or zero.
    pub fn unfairness(&self) -> f64 {
        match self.fpr_ratio {
            Some(r) if r > 0.0 => r.ln().abs(),
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub rows: Vec<GroupMetricsRow>,
    pub threshold: f64,
    pub split: Split,
}

/// One CSV line of a flattened report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCsvRow {
    pub report: String,
    pub split: Split,
    pub threshold: f64,
    pub auc: f64,
    pub group: String,
    pub majority: String,
    pub fpr_group: Option<f64>,
    pub fpr_majority: Option<f64>,
    pub fpr_ratio: Option<f64>,
    pub n_negatives_group: usize,
    pub n_negatives_majority: usize,
}

impl EvalReport {
    pub fn row(&self, group: &str, majority: &str) -> Option<&GroupMetricsRow> {
        self.rows.iter().find(|r| r.group == group && r.majority == majority)
    }

    pub fn csv_rows(&self, name: &str) -> Vec<ReportCsvRow> {
        self.rows
            .iter()
            .map(|r| ReportCsvRow {
                report: name.to_string(),
                split: self.split,
                threshold: self.threshold,
                auc: self.auc,
                group: r.group.clone(),
                majority: r.majority.clone(),
                fpr_group: r.fpr_group,
                fpr_majority: r.fpr_majority,
                fpr_ratio: r.fpr_ratio,
                n_negatives_group: r.n_negatives_group,
                n_negatives_majority: r.n_negatives_majority,
            })
            .collect()
    }

    pub fn to_csv_string(&self, name: &str) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows(name) {
            writer.serialize(row).expect("report rows always serialize");
        }
        String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("reports always serialize");
        fs::write(path, text).map_err(|e| MetricsError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn write_csv(&self, path: &Path, name: &str) -> Result<(), MetricsError> {
        fs::write(path, self.to_csv_string(name)).map_err(|e| MetricsError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// AUC over the whole split plus one FPR row per configured pair.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    predictions: &HashMap<String, f64>,
    config: &GroupConfig,
    threshold: f64,
) -> Result<EvalReport, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    let examples = dataset.split(split);
    let missing: Vec<String> = examples
        .iter()
        .filter(|ex| !predictions.contains_key(&ex.id))
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::Coverage {
            split,
            count: missing.len(),
            sample: missing.into_iter().take(10).collect(),
        });
    }
    let mut scores = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = predictions[&ex.id];
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::NotAProbability {
                id: ex.id.clone(),
                value: p,
            });
        }
        scores.push(p);
    }
    let labels: Vec<bool> = examples.iter().map(|ex| ex.label).collect();
    let auc = roc_auc(&scores, &labels)?;

    let negative_fpr = |group: &str| -> Result<(Option<f64>, usize), MetricsError> {
        let negatives = dataset.group_negatives(split, group)?;
        let preds: Vec<f64> = negatives.iter().map(|ex| predictions[&ex.id]).collect();
        let labels = vec![false; preds.len()];
        match fpr(&preds, &labels, threshold) {
            Ok(rate) => Ok((Some(rate), preds.len())),
            Err(MetricsError::NoNegatives) => Ok((None, 0)),
            Err(e) => Err(e),
        }
    };

    let mut rows = Vec::with_capacity(config.pairs.len());
    for pair in &config.pairs {
        let (fpr_group, n_group) = negative_fpr(&pair.group)?;
        let (fpr_majority, n_majority) = negative_fpr(&pair.majority)?;
        let ratio = match (fpr_group, fpr_majority) {
            (Some(g), Some(m)) => fpr_ratio(g, m).ok(),
            _ => None,
        };
        if ratio.is_none() {
            log::warn!(
                "FPR ratio undefined for {}/{} on {split}: group FPR {fpr_group:?}, majority FPR {fpr_majority:?}",
                pair.group,
                pair.majority
            );
        }
        rows.push(GroupMetricsRow {
            group: pair.group.clone(),
            majority: pair.majority.clone(),
            fpr_group,
            fpr_majority,
            fpr_ratio: ratio,
            n_negatives_group: n_group,
            n_negatives_majority: n_majority,
        });
    }
    Ok(EvalReport {
        auc,
        rows,
        threshold,
        split,
    })
}
