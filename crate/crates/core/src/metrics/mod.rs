//! Evaluation metrics over a learned text-motion feature space: Frechet
//! distance between Gaussian fits, subset-distance diversity and
//! multimodality, matched-pair distance, and retrieval precision against a
//! 32-candidate description pool.

mod extractor;
mod linalg;

pub use extractor::{
    description_key, train_extractor, ExtractorConfig, FeatureExtractor, TrainedExtractor,
};
pub use linalg::{covariance, mean_vector, sqrtm_psd};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::Rng;

/// Covariance shrinkage added before the matrix square root.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

fn to_f64_rows<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

/// Frechet distance between Gaussian fits of two feature sets (rows =
/// samples). Covariances get `1e-6 I` shrinkage before the square root.
pub fn fid<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    for (name, t) in [("first", a), ("second", b)] {
        if t.shape().len() != 2 || t.rows() < 2 {
            return Err(CoreError::contract(format!(
                "{name} feature set needs at least 2 samples, got {:?}",
                t.shape()
            )));
        }
    }
    if a.cols() != b.cols() {
        return Err(CoreError::contract("feature widths differ"));
    }
    let ra = to_f64_rows(a);
    let rb = to_f64_rows(b);
    let mu_a = mean_vector(&ra);
    let mu_b = mean_vector(&rb);
    let cov_a = covariance(&ra, &mu_a);
    let cov_b = covariance(&rb, &mu_b);
    fid_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Frechet distance from explicit moments:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn fid_from_moments(
    mu_a: &[f64],
    cov_a: &[Vec<f64>],
    mu_b: &[f64],
    cov_b: &[Vec<f64>],
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d || cov_b.len() != d {
        return Err(CoreError::contract("moment dimensions differ"));
    }
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    // Shrinkage keeps the square roots defined at desk-scale sample counts.
    let mut sa = cov_a.to_vec();
    let mut sb = cov_b.to_vec();
    for i in 0..d {
        sa[i][i] += COVARIANCE_SHRINKAGE;
        sb[i][i] += COVARIANCE_SHRINKAGE;
    }

    // Tr((S_a S_b)^{1/2}) through the symmetrized product
    // A^{1/2} S_b A^{1/2}, which is PSD.
    let root_a = sqrtm_psd(&sa)?;
    let inner = linalg::matmul(&linalg::matmul(&root_a, &sb), &root_a);
    let eigs = linalg::symmetric_eigenvalues(&inner)?;
    let trace_sqrt: f64 = eigs.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let trace_a: f64 = (0..d).map(|i| sa[i][i]).sum();
    let trace_b: f64 = (0..d).map(|i| sb[i][i]).sum();
    let value = mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(CoreError::numeric("fid", "non-finite distance"));
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Subset-distance metrics
// ---------------------------------------------------------------------------

/// Mean distance between two independently drawn subsets of size `s`,
/// matched by draw index.
fn subset_mean_distance(rows: &[Vec<f64>], s: usize, rng: &mut Rng) -> f64 {
    let a = rng.sample_indices(rows.len(), s);
    let b = rng.sample_indices(rows.len(), s);
    let mut acc = 0.0;
    for i in 0..s {
        acc += euclidean(&rows[a[i]], &rows[b[i]]);
    }
    acc / s as f64
}

/// Diversity: mean Euclidean distance between two random subsets of size
/// `s_d` drawn from the feature set.
pub fn diversity<S: Scalar>(features: &Tensor<S>, s_d: usize, seed: u64) -> Result<f64> {
    if features.shape().len() != 2 || s_d == 0 || 2 * s_d > features.rows() {
        return Err(CoreError::contract(format!(
            "diversity needs 2*{s_d} <= {} samples",
            features.rows()
        )));
    }
    let rows = to_f64_rows(features);
    let mut rng = Rng::new(seed);
    Ok(subset_mean_distance(&rows, s_d, &mut rng))
}

/// Multimodality: the per-description subset distance averaged over `C`
/// description groups, each contributing subsets of size `s_m`.
pub fn multimodality<S: Scalar>(groups: &[Tensor<S>], s_m: usize, seed: u64) -> Result<f64> {
    if groups.is_empty() {
        return Err(CoreError::contract("multimodality needs at least one group"));
    }
    let mut acc = 0.0;
    for (c, group) in groups.iter().enumerate() {
        if group.shape().len() != 2 || s_m == 0 || 2 * s_m > group.rows() {
            return Err(CoreError::contract(format!(
                "multimodality group {c} needs 2*{s_m} <= {} samples",
                group.rows()
            )));
        }
        let rows = to_f64_rows(group);
        let mut rng = Rng::new(seed.wrapping_add(c as u64));
        acc += subset_mean_distance(&rows, s_m, &mut rng);
    }
    Ok(acc / groups.len() as f64)
}

/// Multi-modal distance: mean Euclidean distance between motion features
/// and their matched text features, aligned by row.
pub fn mm_dist<S: Scalar>(motion: &Tensor<S>, text: &Tensor<S>) -> Result<f64> {
    if motion.shape() != text.shape() || motion.shape().len() != 2 || motion.rows() == 0 {
        return Err(CoreError::contract(format!(
            "mm_dist needs equal aligned sets, got {:?} vs {:?}",
            motion.shape(),
            text.shape()
        )));
    }
    let m = to_f64_rows(motion);
    let t = to_f64_rows(text);
    let acc: f64 = m.iter().zip(t.iter()).map(|(a, b)| euclidean(a, b)).sum();
    Ok(acc / m.len() as f64)
}

// ---------------------------------------------------------------------------
// R-Precision
// ---------------------------------------------------------------------------

/// Candidate pool size: the true description plus 31 mismatched ones.
pub const R_PRECISION_POOL: usize = 32;

/// Retrieval precision: for each motion, rank its true description among a
/// 32-candidate pool by Euclidean distance and report the fraction of
/// motions whose truth lands in the top `k`. `text_feats` holds one row per
/// distinct description; `true_keys[i]` is the row of motion `i`'s
/// description.
pub fn r_precision<S: Scalar>(
    motion_feats: &Tensor<S>,
    true_keys: &[usize],
    text_feats: &Tensor<S>,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let n_desc = text_feats.rows();
    if n_desc < R_PRECISION_POOL {
        return Err(CoreError::contract(format!(
            "r_precision needs at least {R_PRECISION_POOL} distinct descriptions, got {n_desc}"
        )));
    }
    if k == 0 || k >= R_PRECISION_POOL {
        return Err(CoreError::contract("k must be in [1, 31]"));
    }
    if motion_feats.rows() != true_keys.len() {
        return Err(CoreError::contract("one true description per motion required"));
    }
    let motions = to_f64_rows(motion_feats);
    let texts = to_f64_rows(text_feats);
    let mut rng = Rng::new(seed);
    let mut hits = 0usize;
    for (i, motion) in motions.iter().enumerate() {
        let truth = true_keys[i];
        // 31 mismatched candidates, distinct and distinct from the truth.
        let mut pool = Vec::with_capacity(R_PRECISION_POOL);
        pool.push(truth);
        for idx in rng.sample_indices(n_desc - 1, R_PRECISION_POOL - 1) {
            pool.push(if idx >= truth { idx + 1 } else { idx });
        }
        let true_dist = euclidean(motion, &texts[truth]);
        // Rank of the truth: candidates strictly closer than it.
        let closer = pool[1..]
            .iter()
            .filter(|&&c| euclidean(motion, &texts[c]) < true_dist)
            .count();
        if closer < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / motions.len() as f64)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// A metric value with its 95% confidence half-width over repeated runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub ci95: f64,
}

/// Mean and normal-approximation 95% confidence half-width of repeated
/// evaluations.
pub fn mean_ci(values: &[f64]) -> MetricValue {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricValue {
        mean,
        ci95: 1.96 * (var / n).sqrt(),
    }
}

/// Full evaluation summary for a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: MetricValue,
    pub r_precision_top1: MetricValue,
    pub r_precision_top2: MetricValue,
    pub r_precision_top3: MetricValue,
    pub diversity: MetricValue,
    pub multimodality: MetricValue,
    pub mm_dist: MetricValue,
    pub generated_samples: usize,
    pub real_samples: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [
            self.fid,
            self.r_precision_top1,
            self.r_precision_top2,
            self.r_precision_top3,
            self.diversity,
            self.multimodality,
            self.mm_dist,
        ]
        .iter()
        .all(|v| v.mean.is_finite() && v.ci95.is_finite())
    }
}

#[cfg(test)]
mod tests;
