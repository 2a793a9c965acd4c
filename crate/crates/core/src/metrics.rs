//! Evaluation metrics: policy entropy, an Inception-Score analogue over
//! oracle class probabilities, Fréchet distance between Gaussian feature
//! fits, and k-NN precision/recall.
//!
//! Features are a fixed statistic of the image (per-channel mean and variance
//! of every patch), so every metric is exactly reproducible.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::mix_logits;
use crate::policy::{sample_next, Condition, Decoder, PolicyError, PolicyParameters, SamplerSettings};
use crate::tensor::softmax_row;
use crate::tokenizer::{ImageGrid, TokenSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

const EIGEN_TOL: f64 = 1e-10;

/// Per-patch `[mean_r, mean_g, mean_b, var_r, var_g, var_b]`, concatenated
/// in row-major patch order.
pub fn feature_map(image: &ImageGrid, patch_size: usize) -> Vec<f64> {
    let (rows, cols) = (image.height() / patch_size, image.width() / patch_size);
    let n = (patch_size * patch_size) as f64;
    let mut out = Vec::with_capacity(rows * cols * 6);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut sum = [0.0; 3];
            let mut sq = [0.0; 3];
            for dr in 0..patch_size {
                for dc in 0..patch_size {
                    let px = image.pixel(pr * patch_size + dr, pc * patch_size + dc);
                    for c in 0..3 {
                        sum[c] += px[c];
                        sq[c] += px[c] * px[c];
                    }
                }
            }
            let mean = sum.map(|s| s / n);
            out.extend(mean);
            for c in 0..3 {
                out.push((sq[c] / n - mean[c] * mean[c]).max(0.0));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| MetricsError::Contract("empty feature set".into()))?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(MetricsError::Contract(format!(
                    "feature row {i} has dimension {}, expected {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::Contract(format!("feature row {i} is not finite")));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn from_images(images: &[ImageGrid], patch_size: usize) -> Result<Self> {
        Self::new(images.iter().map(|i| feature_map(i, patch_size)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased, symmetrized covariance.
pub fn fit_gaussian(features: &FeatureSet) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::Contract(format!(
            "a Gaussian fit needs at least 2 samples, got {n}"
        )));
    }
    let d = features.dim();
    let mut mean = DVector::zeros(d);
    for r in features.rows() {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in features.rows() {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, count: n })
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(min) = eig.eigenvalues.iter().copied().find(|&v| v < -EIGEN_TOL * scale) {
        return Err(MetricsError::Numerical(format!(
            "{what} is not positive semidefinite (eigenvalue {min:e})"
        )));
    }
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(MetricsError::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let ea = psd_eigen(&a.cov, "first covariance")?;
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let ei = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// `exp(mean_x KL(p(y|x) || p(y)))`.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let first = probs
        .first()
        .ok_or_else(|| MetricsError::Contract("inception score of no samples".into()))?;
    let c = first.len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != c || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(MetricsError::Contract(format!("malformed probability row {i}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(MetricsError::Contract(format!("probability row {i} sums to {s}")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..c).map(|k| probs.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii(points: &FeatureSet, k: usize) -> Vec<f64> {
    let rows = points.rows();
    rows.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist2(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &FeatureSet, radii: &[f64], probes: &FeatureSet) -> f64 {
    let inside = probes
        .rows()
        .iter()
        .filter(|p| {
            manifold
                .rows()
                .iter()
                .zip(radii)
                .any(|(c, r)| dist2(p, c) <= *r)
        })
        .count();
    inside as f64 / probes.len() as f64
}

/// `(precision, recall)` with k-th-nearest-neighbor balls.
pub fn knn_precision_recall(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim() != generated.dim() {
        return Err(MetricsError::Contract(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            generated.dim()
        )));
    }
    if k == 0 || k >= real.len() || k >= generated.len() {
        return Err(MetricsError::Contract(format!(
            "k = {k} needs both sets larger than k (sizes {} and {})",
            real.len(),
            generated.len()
        )));
    }
    let precision = coverage(real, &knn_radii(real, k), generated);
    let recall = coverage(generated, &knn_radii(generated, k), real);
    Ok((precision, recall))
}

fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    Rollout,
    TeacherForced,
}

fn next_distribution(lc: &[f64], lu: Option<&[f64]>, guidance: Option<f64>) -> Vec<f64> {
    match (lu, guidance) {
        (Some(lu), Some(s)) => softmax_row(&mix_logits(lc, lu, s).expect("rows share the vocabulary")),
        _ => softmax_row(lc),
    }
}

/// Mean per-token entropy along `budget` sampled rollouts, cycling through
/// `conditions`. Sampling uses temperature 1 with optional guidance.
pub fn rollout_entropy(
    params: &PolicyParameters,
    conditions: &[Condition],
    budget: usize,
    guidance: Option<f64>,
    seed: u64,
) -> Result<f64> {
    if budget == 0 || conditions.is_empty() {
        return Err(MetricsError::Contract("entropy needs a positive budget and conditions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SamplerSettings::default();
    let len = params.config.max_seq_len;
    let mut total = 0.0;
    for i in 0..budget {
        let cond = &conditions[i % conditions.len()];
        let (mut dc, mut lc) = Decoder::start(params, cond)?;
        let mut du = match guidance {
            Some(_) => Some(Decoder::start(params, &Condition::Null)?),
            None => None,
        };
        for t in 0..len {
            let probs = next_distribution(&lc, du.as_ref().map(|(_, l)| l.as_slice()), guidance);
            total += entropy(&probs);
            let logits: Vec<f64> = probs.iter().map(|p| p.ln().max(-1e300)).collect();
            let (tok, _) = sample_next(&logits, &settings, &mut rng)?;
            if t + 1 < len {
                lc = dc.step(tok)?;
                if let Some((d, l)) = du.as_mut() {
                    *l = d.step(tok)?;
                }
            }
        }
    }
    Ok(total / (budget * len) as f64)
}

/// Mean per-token entropy along given token sequences.
pub fn teacher_forced_entropy(
    params: &PolicyParameters,
    data: &[(Condition, TokenSequence)],
    guidance: Option<f64>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(MetricsError::Contract("teacher-forced entropy of no sequences".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (cond, seq) in data {
        let (mut dc, mut lc) = Decoder::start(params, cond)?;
        let mut du = match guidance {
            Some(_) => Some(Decoder::start(params, &Condition::Null)?),
            None => None,
        };
        for (t, &tok) in seq.tokens.iter().enumerate() {
            total += entropy(&next_distribution(&lc, du.as_ref().map(|(_, l)| l.as_slice()), guidance));
            count += 1;
            if t + 1 < seq.len() {
                lc = dc.step(tok)?;
                if let Some((d, l)) = du.as_mut() {
                    *l = d.step(tok)?;
                }
            }
        }
    }
    Ok(total / count as f64)
}
