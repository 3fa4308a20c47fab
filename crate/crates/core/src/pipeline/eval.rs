use log::debug;
use serde::{Deserialize, Serialize};

use super::data::Annotation;
use super::detect::ClassDetection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Per-class AP; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the precision/recall curve with the precision envelope
/// (all-points interpolation). `hits` is in descending score order.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// PASCAL-style evaluation: detections are ranked by final score (input
/// order on ties); each is compared with the same-class object it overlaps
/// most and counts as a hit only if that object is still unclaimed and the
/// overlap reaches `iou_threshold`.
pub fn evaluate_map(dets: &[ClassDetection], gt: &[Vec<Annotation>], classes: usize, iou_threshold: f64) -> MapReport {
    let mut ap = Vec::with_capacity(classes);
    for k in 0..classes {
        let positives: usize = gt.iter().map(|g| g.iter().filter(|a| a.class == k).count()).sum();
        if positives == 0 {
            debug!("class {k} has no ground truth; skipped from the mean");
            ap.push(None);
            continue;
        }
        let mut ranked: Vec<&ClassDetection> = dets.iter().filter(|d| d.class == k).collect();
        ranked.sort_by(|a, b| b.final_score().total_cmp(&a.final_score()));
        let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|d| {
                let Some(objects) = gt.get(d.scene) else {
                    return false;
                };
                let best = objects
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.class == k)
                    .map(|(j, a)| (j, a.bbox.iou(&d.bbox)))
                    .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                        Some((_, b)) if b >= iou => acc,
                        _ => Some((j, iou)),
                    });
                match best {
                    Some((j, iou)) if iou >= iou_threshold && !claimed[d.scene][j] => {
                        claimed[d.scene][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        ap.push(Some(average_precision(&hits, positives)));
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapReport { ap, map }
}
