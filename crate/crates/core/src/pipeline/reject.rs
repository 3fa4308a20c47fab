//! Cheap objectness filter run before network scoring.

use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use super::data::{crop_resize, SyntheticScene};
use super::proposals::propose_boxes;
use super::svm::{LinearSvm, SvmConfig};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

const GRID: usize = 8;

/// Block means of an 8×8 resample, bright-pixel fraction, overall mean and
/// centre-minus-border contrast.
pub fn box_features(image: &Tensor, bbox: &BoundingBox) -> Vec<f64> {
    let crop = crop_resize(image, bbox, GRID);
    let px = crop.data();
    let mut f = Vec::with_capacity(20);
    for bi in 0..4 {
        for bj in 0..4 {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += px[(2 * bi + i) * GRID + 2 * bj + j];
                }
            }
            f.push(s / 4.0);
        }
    }
    let n = px.len() as f64;
    f.push(px.iter().filter(|&&v| v > 0.5).count() as f64 / n);
    f.push(px.iter().sum::<f64>() / n);
    let (mut centre, mut border) = ((0.0, 0), (0.0, 0));
    for i in 0..GRID {
        for j in 0..GRID {
            if (2..GRID - 2).contains(&i) && (2..GRID - 2).contains(&j) {
                centre = (centre.0 + px[i * GRID + j], centre.1 + 1);
            } else {
                border = (border.0 + px[i * GRID + j], border.1 + 1);
            }
        }
    }
    f.push(centre.0 / centre.1 as f64 - border.0 / border.1 as f64);
    f
}

fn max_iou(bbox: &BoundingBox, scene: &SyntheticScene) -> f64 {
    scene.objects.iter().map(|o| o.bbox.iou(bbox)).fold(0.0, f64::max)
}

/// Linear background-versus-object scorer over [`box_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejector {
    pub svm: LinearSvm,
}

impl Rejector {
    /// Positives are proposals with IoU ≥ 0.5 to any object, negatives those
    /// below 0.3; proposals in between are ignored.
    pub fn train(scenes: &[SyntheticScene], cfg: &SvmConfig) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for scene in scenes {
            let (w, h) = scene.size();
            for b in propose_boxes(w, h) {
                let iou = max_iou(&b, scene);
                let y = if iou >= 0.5 {
                    1.0
                } else if iou < 0.3 {
                    -1.0
                } else {
                    continue;
                };
                xs.push(box_features(&scene.image, &b));
                ys.push(y);
            }
        }
        Ok(Self {
            svm: LinearSvm::train(&xs, &ys, cfg)?,
        })
    }

    pub fn objectness(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
        boxes.iter().map(|b| self.svm.score(&box_features(image, b))).collect()
    }
}

/// Indices of the `⌈keep_fraction·n⌉` highest-scoring boxes, returned in input
/// order. Equal scores keep the earlier box.
pub fn reject_boxes(scores: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(param_err!("keep fraction must be in (0, 1], got {keep_fraction}"));
    }
    let keep = ((keep_fraction * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Fraction of ground-truth objects that keep at least one proposal with
/// IoU ≥ 0.5 after rejection.
pub fn rejection_recall(rejector: &Rejector, scenes: &[SyntheticScene], keep_fraction: f64) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for scene in scenes {
        let (w, h) = scene.size();
        let boxes = propose_boxes(w, h);
        let kept = reject_boxes(&rejector.objectness(&scene.image, &boxes)?, keep_fraction)?;
        for o in &scene.objects {
            total += 1;
            if kept.iter().any(|&i| boxes[i].iou(&o.bbox) >= 0.5) {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_all_is_identity() {
        let s = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(reject_boxes(&s, 1.0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_truncate_in_input_order() {
        assert_eq!(reject_boxes(&[1.0; 10], 0.3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn keeps_top_scores() {
        assert_eq!(reject_boxes(&[0.1, 0.9, 0.5, 0.7], 0.5).unwrap(), vec![1, 3]);
    }

    #[test]
    fn fraction_out_of_range() {
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(reject_boxes(&[1.0], f).is_err());
        }
    }
}
