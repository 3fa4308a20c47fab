use std::io::Write;

use serde::{Deserialize, Serialize};

use super::boxes::{nms, BoundingBox};
use super::data::crop_resize;
use crate::error::{dim_err, Result};
use crate::net::Network;
use crate::tensor::Tensor;

/// One scored proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
    /// Context-refined scores; absent until the context stage has run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_scores: Option<Vec<f64>>,
    /// Regression offsets `(dx, dy, dlog w, dlog h)` and the resulting box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<([f64; 4], BoundingBox)>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, scores: Vec<f64>) -> Self {
        Self {
            bbox,
            scores,
            refined_scores: None,
            regression: None,
        }
    }

    pub fn final_scores(&self) -> &[f64] {
        self.refined_scores.as_deref().unwrap_or(&self.scores)
    }

    pub fn final_box(&self) -> BoundingBox {
        self.regression.map_or(self.bbox, |(_, b)| b)
    }

    /// Arg-max class over final scores (lowest index on ties) and its score.
    pub fn class_id(&self) -> (usize, f64) {
        self.final_scores()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &s)| if s > best.1 { (k, s) } else { best })
    }
}

/// Detections of every scene in a split, aligned by scene index.
pub type ScoreTable = Vec<Vec<Detection>>;

/// Crops every box to the network input and scores it.
pub fn score_boxes(net: &Network, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<Detection>> {
    let [_, ih, iw] = net.architecture().input;
    if ih != iw {
        return Err(dim_err!("box scoring needs a square network input, got {ih}x{iw}"));
    }
    boxes
        .iter()
        .map(|b| Ok(Detection::new(*b, net.forward(&crop_resize(image, b, ih))?)))
        .collect()
}

/// A single-class detection after per-class suppression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub scene: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: usize,
    pub score: f64,
    pub refined_score: Option<f64>,
}

/// Splits every detection into one candidate per class, ranks by the final
/// score and suppresses overlaps per class and scene.
pub fn class_detections(table: &ScoreTable, classes: usize, nms_iou: f64) -> Vec<ClassDetection> {
    let mut out = Vec::new();
    for (scene, dets) in table.iter().enumerate() {
        let boxes: Vec<BoundingBox> = dets.iter().map(Detection::final_box).collect();
        for k in 0..classes {
            let finals: Vec<f64> = dets.iter().map(|d| d.final_scores()[k]).collect();
            for i in nms(&boxes, &finals, nms_iou) {
                out.push(ClassDetection {
                    scene,
                    bbox: boxes[i],
                    class: k,
                    score: dets[i].scores[k],
                    refined_score: dets[i].refined_scores.as_ref().map(|r| r[k]),
                });
            }
        }
    }
    out
}

impl ClassDetection {
    pub fn final_score(&self) -> f64 {
        self.refined_score.unwrap_or(self.score)
    }
}

/// Writes one JSON object per line: `{scene, box, class, score, refined_score}`.
pub fn write_jsonl(dets: &[ClassDetection], scene_names: &[String], mut out: impl Write) -> Result<()> {
    for d in dets {
        let line = serde_json::json!({
            "scene": scene_names.get(d.scene).cloned().unwrap_or_else(|| d.scene.to_string()),
            "box": d.bbox,
            "class": d.class,
            "score": d.score,
            "refined_score": d.refined_score,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Unweighted per-box mean of the member tables' scores. Tables must cover
/// the same boxes in the same order.
pub fn average_tables(tables: &[&ScoreTable]) -> Result<ScoreTable> {
    let first = tables.first().ok_or_else(|| dim_err!("no tables to average"))?;
    let n = tables.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(s, dets)| {
            dets.iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut scores = vec![0.0; d.scores.len()];
                    for t in tables {
                        let other = t.get(s).and_then(|ds| ds.get(i)).filter(|o| o.bbox == d.bbox);
                        let other = other.ok_or_else(|| dim_err!("score tables are not aligned at scene {s}"))?;
                        for (acc, v) in scores.iter_mut().zip(other.final_scores()) {
                            *acc += v;
                        }
                    }
                    scores.iter_mut().for_each(|v| *v /= n);
                    Ok(Detection::new(d.bbox, scores))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_id_prefers_refined() {
        let mut d = Detection::new(BoundingBox::new(0, 0, 2, 2), vec![0.1, 0.5]);
        assert_eq!(d.class_id(), (1, 0.5));
        d.refined_scores = Some(vec![0.9, 0.2]);
        assert_eq!(d.class_id(), (0, 0.9));
    }

    #[test]
    fn per_class_nms() {
        let dets = vec![
            Detection::new(BoundingBox::new(0, 0, 10, 10), vec![0.9, 0.1]),
            Detection::new(BoundingBox::new(1, 0, 10, 10), vec![0.8, 0.7]),
        ];
        let out = class_detections(&vec![dets], 2, 0.3);
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].class, out[0].score), (0, 0.9));
        assert_eq!((out[1].class, out[1].score), (1, 0.7));
    }

    #[test]
    fn jsonl_lines() {
        let d = ClassDetection {
            scene: 0,
            bbox: BoundingBox::new(1, 2, 3, 4),
            class: 1,
            score: 0.5,
            refined_score: None,
        };
        let mut buf = Vec::new();
        write_jsonl(&[d, d], &["a".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["scene"], "a");
        assert_eq!(v["box"], serde_json::json!([1, 2, 3, 4]));
        assert!(v["refined_score"].is_null());
    }

    #[test]
    fn averaging_identical_tables_is_identity() {
        let t: ScoreTable = vec![vec![Detection::new(BoundingBox::new(0, 0, 2, 2), vec![0.25, -1.0])]];
        assert_eq!(average_tables(&[&t, &t, &t]).unwrap(), t);
        let other: ScoreTable = vec![vec![Detection::new(BoundingBox::new(1, 0, 2, 2), vec![0.0, 0.0])]];
        assert!(average_tables(&[&t, &other]).is_err());
    }
}
