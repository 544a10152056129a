//! AUROC, FPR at a TPR target, and Gaussian kernel density estimation.
//!
//! AUROC uses the rank (Mann-Whitney) formulation with midranks, so it is
//! exactly the probability a random ID score exceeds a random OOD score
//! with ties counted one half. The FPR threshold is the largest score t
//! such that the ID fraction at or above t meets the target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("score lists must be nonempty")]
    EmptyInput,
    #[error("kernel bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("tpr target must be in (0, 1], got {0}")]
    BadTarget(f64),
    #[error("scores must be finite")]
    NonFinite,
    #[error("grid must be strictly ascending")]
    GridNotAscending,
}

/// A scored sample with its ground-truth split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSample {
    pub idness: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Id,
    Ood,
}

/// Kernel density evaluated on an ascending grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Per-method evaluation record. The JSON serialization carries exactly
/// method, auroc, fpr95, n_id, n_ood and seed; the raw score vectors stay
/// in memory for downstream use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub auroc: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
    #[serde(skip)]
    pub id_scores: Vec<f64>,
    #[serde(skip)]
    pub ood_scores: Vec<f64>,
}

fn check_scores(scores: &[f64]) -> Result<(), MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted one half. Computed with midranks; exact for finite inputs.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, MetricError> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    let n_id = id_scores.len();
    let n_ood = ood_scores.len();
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(n_id + n_ood);
    all.extend(id_scores.iter().map(|&s| (s, true)));
    all.extend(ood_scores.iter().map(|&s| (s, false)));
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // midranks over tie groups; ranks are half-integers so the sums stay
    // exact in f64
    let mut rank_sum_id = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based: positions i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_id += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// False positive rate at the threshold achieving at least `tpr_target`
/// true positive rate on the ID scores. The threshold is the largest score
/// value t with fraction(id >= t) >= target, favoring ID recall on finite
/// samples.
pub fn fpr_at_tpr(
    id_scores: &[f64],
    ood_scores: &[f64],
    tpr_target: f64,
) -> Result<f64, MetricError> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(MetricError::BadTarget(tpr_target));
    }
    let n = id_scores.len();
    let mut desc = id_scores.to_vec();
    desc.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    // smallest k with k/n >= target; k = n always satisfies it
    let mut k = n;
    for cand in 1..=n {
        if cand as f64 / n as f64 >= tpr_target {
            k = cand;
            break;
        }
    }
    let threshold = desc[k - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Gaussian kernel density on the given ascending grid.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<DensityCurve, MetricError> {
    check_scores(samples)?;
    if !(bandwidth > 0.0) {
        return Err(MetricError::NonPositiveBandwidth(bandwidth));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricError::GridNotAscending);
    }
    let n = samples.len() as f64;
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &s in samples {
                let z = (x - s) / bandwidth;
                acc += (-0.5 * z * z).exp();
            }
            norm * acc
        })
        .collect();
    Ok(DensityCurve { grid: grid.to_vec(), density })
}

/// Silverman's rule of thumb: 1.06 * sigma * n^(-1/5), floored to stay
/// usable on near-constant samples.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 1e-3;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    h.max(1e-6)
}

/// Evenly spaced grid of `points` values across [lo, hi].
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && hi > lo);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}
