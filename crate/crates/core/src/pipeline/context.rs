//! Whole-scene classification and per-class re-scoring of detections.

use serde::{Deserialize, Serialize};

use super::data::SyntheticScene;
use super::detect::ScoreTable;
use super::svm::{train_one_vs_rest, LinearSvm, SvmConfig};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

const LAGS: [(usize, isize); 8] = [(0, 1), (1, 0), (1, 1), (1, -1), (0, 2), (2, 0), (2, 2), (2, -2)];

/// Normalised background autocorrelation at a few lags. Pixels brighter than
/// 0.5 in magnitude (object parts) are left out.
pub fn scene_features(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let px = image.data();
    let bg = |v: f64| v.abs() < 0.5;
    let (mut var, mut n0) = (0.0, 0usize);
    for &v in px.iter().filter(|&&v| bg(v)) {
        var += v * v;
        n0 += 1;
    }
    let var = (var / n0.max(1) as f64).max(1e-12);
    let mut f: Vec<f64> = LAGS
        .iter()
        .map(|&(di, dj)| {
            let (mut s, mut n) = (0.0, 0usize);
            for i in 0..h.saturating_sub(di) {
                for j in 0..w {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let (a, b) = (px[i * w + j], px[(i + di) * w + jj as usize]);
                    if bg(a) && bg(b) {
                        s += a * b;
                        n += 1;
                    }
                }
            }
            s / n.max(1) as f64 / var
        })
        .collect();
    f.push(var.sqrt());
    f
}

/// One-vs-rest theme classifier; its scores are the context vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneClassifier {
    pub svms: Vec<LinearSvm>,
}

impl SceneClassifier {
    pub fn train(scenes: &[SyntheticScene], themes: usize, cfg: &SvmConfig) -> Result<Self> {
        let xs: Vec<Vec<f64>> = scenes.iter().map(|s| scene_features(&s.image)).collect();
        let ys: Vec<usize> = scenes.iter().map(|s| s.theme).collect();
        Ok(Self {
            svms: train_one_vs_rest(&xs, &ys, themes, cfg)?,
        })
    }

    pub fn scores(&self, image: &Tensor) -> Result<Vec<f64>> {
        let f = scene_features(image);
        self.svms.iter().map(|s| s.score(&f)).collect()
    }
}

/// Per-class linear SVMs over `concat(scene_scores, det_scores)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub context_dim: usize,
    pub svms: Vec<LinearSvm>,
}

impl ContextModel {
    /// Zero context weights and identity on the detection block.
    pub fn identity(context_dim: usize, classes: usize) -> Self {
        let svms = (0..classes)
            .map(|k| {
                let mut w = vec![0.0; context_dim + classes];
                w[context_dim + k] = 1.0;
                LinearSvm::raw(w, 0.0)
            })
            .collect();
        Self { context_dim, svms }
    }

    /// Trains class `k`'s SVM on every detection in `table`, labelled
    /// positive when it overlaps a class-`k` object with IoU ≥ 0.5.
    pub fn train(
        table: &ScoreTable,
        scene_scores: &[Vec<f64>],
        scenes: &[SyntheticScene],
        classes: usize,
        cfg: &SvmConfig,
    ) -> Result<Self> {
        let context_dim = scene_scores.first().map_or(0, Vec::len);
        let mut xs = Vec::new();
        let mut best = Vec::new();
        for ((dets, ctx), scene) in table.iter().zip(scene_scores).zip(scenes) {
            for d in dets {
                xs.push(ctx.iter().chain(&d.scores).copied().collect::<Vec<f64>>());
                let hit: Vec<bool> = (0..classes)
                    .map(|k| scene.objects.iter().any(|o| o.class == k && o.bbox.iou(&d.bbox) >= 0.5))
                    .collect();
                best.push(hit);
            }
        }
        let svms = (0..classes)
            .map(|k| {
                let y: Vec<f64> = best.iter().map(|h| if h[k] { 1.0 } else { -1.0 }).collect();
                LinearSvm::train(&xs, &y, &SvmConfig { seed: cfg.seed + k as u64, ..*cfg })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { context_dim, svms })
    }

    /// Weight on scene score `theme` in class `k`'s refined score.
    pub fn context_weight(&self, k: usize, theme: usize) -> f64 {
        self.svms[k].effective_weight(theme)
    }

    pub fn apply(&self, table: &mut ScoreTable, scene_scores: &[Vec<f64>]) -> Result<()> {
        if table.len() != scene_scores.len() {
            return Err(dim_err!("{} scenes with {} context vectors", table.len(), scene_scores.len()));
        }
        for (dets, ctx) in table.iter_mut().zip(scene_scores) {
            for d in dets {
                d.refined_scores = Some(context_refine(&d.scores, ctx, self)?);
            }
        }
        Ok(())
    }
}

/// `refined_k = w_k · concat(scene_scores, det_scores) + b_k`.
pub fn context_refine(det_scores: &[f64], scene_scores: &[f64], model: &ContextModel) -> Result<Vec<f64>> {
    if scene_scores.len() != model.context_dim || det_scores.len() != model.svms.len() {
        return Err(dim_err!(
            "context model expects {} + {} scores, got {} + {}",
            model.context_dim,
            model.svms.len(),
            scene_scores.len(),
            det_scores.len()
        ));
    }
    let x: Vec<f64> = scene_scores.iter().chain(det_scores).copied().collect();
    model.svms.iter().map(|s| s.score(&x)).collect()
}
