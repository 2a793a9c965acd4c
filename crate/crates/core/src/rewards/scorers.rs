use serde::{Deserialize, Serialize};

use super::{Result, RewardError};
use crate::tokenizer::ImageGrid;

/// Expected mean absolute difference of two independent U(0,1) draws.
const NOISE_TV: f64 = 1.0 / 3.0;
/// Fraction of the reference-to-noise gap that maps to a zero score.
const NOISE_SPAN: f64 = 0.8;

/// Mean absolute channel difference over horizontal and vertical neighbor
/// pairs.
pub fn total_variation(image: &ImageGrid) -> f64 {
    let (h, w) = (image.height(), image.width());
    let mut total = 0.0;
    let mut pairs = 0usize;
    let diff = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                total += diff(image.pixel(r, c), image.pixel(r, c + 1));
                pairs += 1;
            }
            if r + 1 < h {
                total += diff(image.pixel(r, c), image.pixel(r + 1, c));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / (3 * pairs) as f64
    }
}

/// No-reference quality: penalizes total variation in excess of the
/// reference corpus mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScorer {
    pub reference_tv: f64,
    pub calibration: f64,
}

impl QualityScorer {
    pub fn calibrate(reference: &[ImageGrid]) -> Result<Self> {
        if reference.is_empty() {
            return Err(RewardError::Configuration(
                "quality calibration needs reference images".into(),
            ));
        }
        let reference_tv =
            reference.iter().map(total_variation).sum::<f64>() / reference.len() as f64;
        let calibration = (NOISE_TV - reference_tv) * NOISE_SPAN;
        if calibration <= 0.0 {
            return Err(RewardError::Configuration(format!(
                "reference corpus total variation {reference_tv:.4} is not below noise level"
            )));
        }
        Ok(Self {
            reference_tv,
            calibration,
        })
    }

    pub fn score(&self, image: &ImageGrid) -> f64 {
        let excess = (total_variation(image) - self.reference_tv) / self.calibration;
        1.0 - excess.clamp(0.0, 1.0)
    }
}

/// Local realism: `exp(-d)` with `d` the L2 distance between square-rooted
/// soft color histograms of the image and the nearest stored reference.
///
/// Histograms live on the codebook's color lattice. Each pixel spreads unit
/// mass over lattice colors with a Gaussian kernel. Comparing square roots of
/// the counts makes `d` depend only on how much mass the two histograms
/// share, so spreading mass away from the reference colors never lowers it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismScorer {
    levels: usize,
    height: usize,
    width: usize,
    bandwidth: f64,
    references: Vec<Vec<f64>>,
}

impl RealismScorer {
    pub fn fit(reference: &[ImageGrid], levels: usize) -> Result<Self> {
        let first = reference.first().ok_or_else(|| {
            RewardError::Configuration("realism statistics need reference images".into())
        })?;
        if levels < 2 {
            return Err(RewardError::Configuration(format!(
                "histogram lattice needs at least 2 levels, got {levels}"
            )));
        }
        let mut scorer = Self {
            levels,
            height: first.height(),
            width: first.width(),
            bandwidth: 0.5 / (levels - 1) as f64,
            references: Vec::new(),
        };
        let mut refs = Vec::with_capacity(reference.len());
        for img in reference {
            scorer.check(img)?;
            refs.push(scorer.root_histogram(img));
        }
        scorer.references = refs;
        Ok(scorer)
    }

    fn check(&self, image: &ImageGrid) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(RewardError::Contract(format!(
                "image is {}x{}, realism statistics were fitted on {}x{}",
                image.height(),
                image.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn histogram(&self, image: &ImageGrid) -> Vec<f64> {
        let l = self.levels;
        let step = 1.0 / (l - 1) as f64;
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let mut hist = vec![0.0; l * l * l];
        let mut channel = vec![0.0; l];
        let mut weights = vec![[0.0; 3]; l];
        for px in image.pixels() {
            for (ch, &v) in px.iter().enumerate() {
                for (k, w) in channel.iter_mut().enumerate() {
                    let d = v - k as f64 * step;
                    *w = (-d * d * inv).exp();
                }
                let total: f64 = channel.iter().sum();
                for k in 0..l {
                    weights[k][ch] = channel[k] / total;
                }
            }
            for r in 0..l {
                for g in 0..l {
                    let rg = weights[r][0] * weights[g][1];
                    for b in 0..l {
                        hist[(r * l + g) * l + b] += rg * weights[b][2];
                    }
                }
            }
        }
        hist
    }

    fn root_histogram(&self, image: &ImageGrid) -> Vec<f64> {
        self.histogram(image).into_iter().map(f64::sqrt).collect()
    }

    pub fn distance(&self, image: &ImageGrid) -> Result<f64> {
        self.check(image)?;
        let h = self.root_histogram(image);
        Ok(self
            .references
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&h)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min))
    }

    pub fn score(&self, image: &ImageGrid) -> Result<f64> {
        Ok((-self.distance(image)?).exp())
    }
}
