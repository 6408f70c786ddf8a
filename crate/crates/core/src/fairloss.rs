//! Numerical kernel shared by both remediation losses: link functions, cross
//! entropy, Bernoulli KL, and the squared Maximum Mean Discrepancy between two
//! samples of predicted probabilities.
//!
//! Probabilities that enter `logit`, the KL or the cross entropy are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` by the caller through [`clamp_prob`]. Gradient code
//! uses the same clamp, so a clamped coordinate has zero derivative in both the
//! loss and its gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp margin for probabilities entering logs and logits.
pub const PROB_EPS: f64 = 1e-7;

/// Bandwidth used when the kernel config does not give one.
pub const DEFAULT_BANDWIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("probability {0} is not strictly inside (0, 1)")]
    Boundary(f64),
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("kernel bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> Result<f64, LossError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LossError::Boundary(p));
    }
    Ok((p / (1.0 - p)).ln())
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Whether [`clamp_prob`] leaves `p` untouched.
pub fn is_unclamped(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

/// Mean binary cross entropy of clamped predictions.
pub fn cross_entropy(predictions: &[f64], labels: &[bool]) -> Result<f64, LossError> {
    if predictions.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LossError::Empty("cross_entropy"));
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(LossError::Boundary(p));
        }
        let p = clamp_prob(p);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / predictions.len() as f64)
}

/// KL(Bernoulli(p) || Bernoulli(q)).
pub fn bernoulli_kl(p: f64, q: f64) -> Result<f64, LossError> {
    for v in [p, q] {
        if !(v > 0.0 && v < 1.0) {
            return Err(LossError::Boundary(v));
        }
    }
    let kl = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    // rounding can produce tiny negatives when p ~ q
    Ok(kl.max(0.0))
}

/// Mean over instances of KL(P_reference || P_model).
pub fn mean_bernoulli_kl(reference: &[f64], model: &[f64]) -> Result<f64, LossError> {
    if reference.len() != model.len() {
        return Err(LossError::LengthMismatch {
            left: reference.len(),
            right: model.len(),
        });
    }
    if reference.is_empty() {
        return Err(LossError::Empty("mean_bernoulli_kl"));
    }
    let mut total = 0.0;
    for (&p, &q) in reference.iter().zip(model) {
        total += bernoulli_kl(p, q)?;
    }
    Ok(total / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    #[default]
    Fixed,
    /// Median pairwise distance of the pooled sample.
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub bandwidth_mode: BandwidthMode,
}

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::gaussian(DEFAULT_BANDWIDTH)
    }
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidth,
            bandwidth_mode: BandwidthMode::Fixed,
        }
    }

    pub fn median_heuristic() -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidth: DEFAULT_BANDWIDTH,
            bandwidth_mode: BandwidthMode::MedianHeuristic,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.bandwidth_mode == BandwidthMode::Fixed && !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(LossError::Bandwidth(self.bandwidth));
        }
        Ok(())
    }

    /// The bandwidth used for this pair of samples.
    ///
    /// Under the median heuristic a zero median (all values equal) falls back to
    /// the configured bandwidth. The resolved value is treated as a constant by
    /// [`mmd2_gradient`].
    pub fn resolve(&self, a: &[f64], b: &[f64]) -> Result<f64, LossError> {
        self.validate()?;
        match self.bandwidth_mode {
            BandwidthMode::Fixed => Ok(self.bandwidth),
            BandwidthMode::MedianHeuristic => {
                let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
                let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
                for i in 0..pooled.len() {
                    for j in i + 1..pooled.len() {
                        dists.push((pooled[i] - pooled[j]).abs());
                    }
                }
                if dists.is_empty() {
                    return Ok(self.bandwidth);
                }
                dists.sort_by(f64::total_cmp);
                let n = dists.len();
                let median = if n % 2 == 1 {
                    dists[n / 2]
                } else {
                    0.5 * (dists[n / 2 - 1] + dists[n / 2])
                };
                if median > 0.0 && median.is_finite() {
                    Ok(median)
                } else {
                    Ok(if self.bandwidth > 0.0 {
                        self.bandwidth
                    } else {
                        DEFAULT_BANDWIDTH
                    })
                }
            }
        }
    }
}

#[inline]
fn gaussian(u: f64, v: f64, inv_two_h2: f64) -> f64 {
    let d = u - v;
    (-d * d * inv_two_h2).exp()
}

fn mean_kernel(x: &[f64], y: &[f64], inv_two_h2: f64) -> f64 {
    let mut total = 0.0;
    for &u in x {
        for &v in y {
            total += gaussian(u, v, inv_two_h2);
        }
    }
    total / (x.len() * y.len()) as f64
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.is_empty() || b.is_empty() {
        return Err(LossError::Empty("mmd2"));
    }
    Ok(())
}

/// Biased (V-statistic) estimate of squared MMD with a Gaussian kernel.
pub fn mmd2(a: &[f64], b: &[f64], kernel: &KernelSpec) -> Result<f64, LossError> {
    check_samples(a, b)?;
    let h = kernel.resolve(a, b)?;
    let inv_two_h2 = 1.0 / (2.0 * h * h);
    let value = mean_kernel(a, a, inv_two_h2) + mean_kernel(b, b, inv_two_h2) - 2.0 * mean_kernel(a, b, inv_two_h2);
    Ok(value.max(0.0))
}

/// MMD estimate together with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdGradient {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Exact partial derivatives of [`mmd2`] with respect to every sample element.
///
/// The returned value is not clamped at zero, so value and gradient describe
/// the same smooth function.
pub fn mmd2_gradient(a: &[f64], b: &[f64], kernel: &KernelSpec) -> Result<MmdGradient, LossError> {
    check_samples(a, b)?;
    let h = kernel.resolve(a, b)?;
    let inv_h2 = 1.0 / (h * h);
    let inv_two_h2 = 0.5 * inv_h2;
    let (n, m) = (a.len() as f64, b.len() as f64);

    // d k(u, v) / du = -(u - v) / h^2 * k(u, v)
    let mut grad_a = vec![0.0; a.len()];
    let mut grad_b = vec![0.0; b.len()];
    let (mut kaa, mut kbb, mut kab) = (0.0, 0.0, 0.0);

    for i in 0..a.len() {
        for j in 0..a.len() {
            let k = gaussian(a[i], a[j], inv_two_h2);
            kaa += k;
            // each unordered pair contributes twice through the symmetric double sum
            grad_a[i] += 2.0 * (-(a[i] - a[j]) * inv_h2 * k) / (n * n);
        }
    }
    for i in 0..b.len() {
        for j in 0..b.len() {
            let k = gaussian(b[i], b[j], inv_two_h2);
            kbb += k;
            grad_b[i] += 2.0 * (-(b[i] - b[j]) * inv_h2 * k) / (m * m);
        }
    }
    for i in 0..a.len() {
        for j in 0..b.len() {
            let k = gaussian(a[i], b[j], inv_two_h2);
            kab += k;
            let dk_du = -(a[i] - b[j]) * inv_h2 * k;
            grad_a[i] -= 2.0 * dk_du / (n * m);
            grad_b[j] += 2.0 * dk_du / (n * m);
        }
    }
    let value = kaa / (n * n) + kbb / (m * m) - 2.0 * kab / (n * m);
    Ok(MmdGradient { value, grad_a, grad_b })
}
