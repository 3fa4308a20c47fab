use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// L2 regularisation strength.
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Reweight positives so both classes carry equal total loss.
    pub balance: bool,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 30,
            learning_rate: 0.05,
            balance: true,
            seed: 0,
        }
    }
}

/// Binary linear SVM on internally standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearSvm {
    /// `w·x + b` with no standardisation.
    pub fn raw(weights: Vec<f64>, bias: f64) -> Self {
        let n = weights.len();
        Self {
            weights,
            bias,
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(dim_err!("svm expects {} features, got {}", self.dim(), x.len()));
        }
        let mut s = self.bias;
        for i in 0..x.len() {
            s += self.weights[i] * (x[i] - self.mean[i]) * self.scale[i];
        }
        Ok(s)
    }

    /// Weight on raw (unstandardised) feature `i`.
    pub fn effective_weight(&self, i: usize) -> f64 {
        self.weights[i] * self.scale[i]
    }

    /// Minimises `λ/2‖w‖² + mean weighted hinge` by per-sample subgradient
    /// steps with a decaying rate.
    pub fn train(xs: &[Vec<f64>], labels: &[f64], cfg: &SvmConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(param_err!("{} samples with {} labels", xs.len(), labels.len()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(param_err!("svm labels must be -1 or +1"));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(dim_err!("ragged svm features"));
        }
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            for i in 0..d {
                scale[i] += (x[i] - mean[i]).powi(2) / n;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });

        let pos = labels.iter().filter(|&&y| y > 0.0).count() as f64;
        let neg = n - pos;
        let (wp, wn) = if cfg.balance && pos > 0.0 && neg > 0.0 {
            (n / (2.0 * pos), n / (2.0 * neg))
        } else {
            (1.0, 1.0)
        };

        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (0..d).map(|i| (x[i] - mean[i]) * scale[i]).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut t = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let eta = cfg.learning_rate / (1.0 + t as f64 / xs.len() as f64);
                t += 1;
                let y = labels[i];
                let margin = y * (b + w.iter().zip(&z[i]).map(|(a, c)| a * c).sum::<f64>());
                w.iter_mut().for_each(|v| *v *= 1.0 - eta * cfg.lambda);
                if margin < 1.0 {
                    let c = eta * y * if y > 0.0 { wp } else { wn };
                    w.iter_mut().zip(&z[i]).for_each(|(v, zi)| *v += c * zi);
                    b += c;
                }
            }
        }
        Ok(Self {
            weights: w,
            bias: b,
            mean,
            scale,
        })
    }
}

/// One-vs-rest bank of binary SVMs.
pub fn train_one_vs_rest(xs: &[Vec<f64>], classes: &[usize], k: usize, cfg: &SvmConfig) -> Result<Vec<LinearSvm>> {
    (0..k)
        .map(|c| {
            let y: Vec<f64> = classes.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            LinearSvm::train(xs, &y, &SvmConfig { seed: cfg.seed + c as u64, ..*cfg })
        })
        .collect()
}
