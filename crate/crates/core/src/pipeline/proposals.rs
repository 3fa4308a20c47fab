use super::boxes::BoundingBox;

/// Square object sizes and grid pitch used for the toy scenes.
pub const DEFAULT_SCALES: [usize; 3] = [16, 20, 24];
pub const DEFAULT_STRIDE: usize = 4;

/// Every `s×s` window on a `stride` grid for each scale that fits the image,
/// ordered by scale, then row, then column.
pub fn propose_grid(width: usize, height: usize, scales: &[usize], stride: usize) -> Vec<BoundingBox> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for &s in scales {
        if s == 0 || s > width || s > height {
            continue;
        }
        for y in (0..=height - s).step_by(stride) {
            for x in (0..=width - s).step_by(stride) {
                out.push(BoundingBox::new(x, y, s, s));
            }
        }
    }
    out
}

pub fn propose_boxes(width: usize, height: usize) -> Vec<BoundingBox> {
    propose_grid(width, height, &DEFAULT_SCALES, DEFAULT_STRIDE)
}

/// Closed-form size of [`propose_grid`].
pub fn grid_proposal_count(width: usize, height: usize, scales: &[usize], stride: usize) -> usize {
    scales
        .iter()
        .filter(|&&s| s >= 1 && s <= width && s <= height)
        .map(|&s| ((width - s) / stride + 1) * ((height - s) / stride + 1))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_object_is_covered() {
        let gt = BoundingBox::new(14, 14, 20, 20);
        assert!(propose_boxes(48, 48).iter().any(|b| b.iou(&gt) >= 0.5));
    }

    #[test]
    fn every_placement_is_covered() {
        for &s in &DEFAULT_SCALES {
            for y in 0..=48 - s {
                for x in 0..=48 - s {
                    let gt = BoundingBox::new(x, y, s, s);
                    let best = propose_boxes(48, 48).iter().map(|b| b.iou(&gt)).fold(0.0, f64::max);
                    assert!(best >= 0.5, "{gt:?}: {best}");
                }
            }
        }
    }

    #[test]
    fn small_image_falls_back_to_fitting_scales() {
        assert_eq!(propose_boxes(20, 20).len(), grid_proposal_count(20, 20, &DEFAULT_SCALES, 4));
        assert!(propose_boxes(8, 8).is_empty());
    }
}
