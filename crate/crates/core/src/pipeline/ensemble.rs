use serde::{Deserialize, Serialize};

use super::data::Annotation;
use super::detect::{average_tables, class_detections, ScoreTable};
use super::eval::evaluate_map;
use crate::error::{param_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    /// Selected model indices in the order they were added.
    pub selected: Vec<usize>,
    /// Validation mAP of every candidate on its own.
    pub single_maps: Vec<f64>,
    /// Validation mAP of the unweighted score average of `selected`.
    pub map: f64,
}

impl EnsembleSelection {
    pub fn best_single(&self) -> f64 {
        self.single_maps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// mAP of the unweighted average of `members`' scores.
pub fn ensemble_map(
    tables: &[ScoreTable],
    members: &[usize],
    gt: &[Vec<Annotation>],
    classes: usize,
    nms_iou: f64,
) -> Result<f64> {
    let refs: Vec<&ScoreTable> = members.iter().map(|&i| &tables[i]).collect();
    let avg = average_tables(&refs)?;
    Ok(evaluate_map(&class_detections(&avg, classes, nms_iou), gt, classes, 0.5).map)
}

/// Forward selection: start from the best single model, then repeatedly add
/// the candidate whose inclusion gives the highest averaged mAP, stopping as
/// soon as no addition strictly improves it. Ties pick the lower index.
pub fn greedy_ensemble(
    tables: &[ScoreTable],
    gt: &[Vec<Annotation>],
    classes: usize,
    nms_iou: f64,
) -> Result<EnsembleSelection> {
    if tables.is_empty() {
        return Err(param_err!("no candidate models"));
    }
    let single_maps = (0..tables.len())
        .map(|i| ensemble_map(tables, &[i], gt, classes, nms_iou))
        .collect::<Result<Vec<f64>>>()?;
    let first = (0..tables.len()).fold(0, |b, i| if single_maps[i] > single_maps[b] { i } else { b });
    let mut selected = vec![first];
    let mut current = single_maps[first];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..tables.len()).filter(|i| !selected.contains(i)) {
            let mut trial = selected.clone();
            trial.push(i);
            let m = ensemble_map(tables, &trial, gt, classes, nms_iou)?;
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        match best {
            Some((i, m)) if m > current => {
                selected.push(i);
                current = m;
            }
            _ => break,
        }
    }
    let selection = EnsembleSelection {
        selected,
        single_maps,
        map: current,
    };
    assert!(selection.map >= selection.best_single());
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::boxes::BoundingBox;
    use crate::pipeline::detect::Detection;

    fn table(scores: &[[f64; 2]]) -> ScoreTable {
        vec![scores
            .iter()
            .enumerate()
            .map(|(i, s)| Detection::new(BoundingBox::new(i * 10, 0, 8, 8), s.to_vec()))
            .collect()]
    }

    #[test]
    fn duplicates_select_one() {
        let gt = vec![vec![Annotation { class: 0, bbox: BoundingBox::new(0, 0, 8, 8) }]];
        let t = table(&[[0.9, 0.0], [0.5, 0.0]]);
        let sel = greedy_ensemble(&[t.clone(), t.clone(), t], &gt, 2, 0.3).unwrap();
        assert_eq!(sel.selected, vec![0]);
        assert_eq!(sel.map, sel.best_single());
    }
}
