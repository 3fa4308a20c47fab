use serde::{Deserialize, Serialize};

/// Integer pixel box; serialises as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for BoundingBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn intersection(&self, other: &BoundingBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Centre `(cx, cy)` in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    /// Box from a continuous centre and size, rounded and clipped to the image.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, width: usize, height: usize) -> Self {
        let x0 = (cx - w / 2.0).round().clamp(0.0, (width - 1) as f64) as usize;
        let y0 = (cy - h / 2.0).round().clamp(0.0, (height - 1) as f64) as usize;
        let x1 = ((cx + w / 2.0).round() as isize).clamp(x0 as isize + 1, width as isize) as usize;
        let y1 = ((cy + h / 2.0).round() as isize).clamp(y0 as isize + 1, height as isize) as usize;
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// descending score order; ties keep input order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BoundingBox::new(0, 0, 4, 4);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BoundingBox::new(4, 0, 4, 4)), 0.0);
        assert!((a.iou(&BoundingBox::new(2, 0, 4, 4)) - 8.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [
            BoundingBox::new(0, 0, 10, 10),
            BoundingBox::new(1, 1, 10, 10),
            BoundingBox::new(20, 20, 5, 5),
        ];
        assert_eq!(nms(&boxes, &[0.5, 0.9, 0.1], 0.3), vec![1, 2]);
    }

    #[test]
    fn from_center_clips() {
        let b = BoundingBox::from_center(2.0, 2.0, 10.0, 10.0, 8, 8);
        assert_eq!(b, BoundingBox::new(0, 0, 7, 7));
        assert!(b.fits(8, 8));
        let b = BoundingBox::from_center(10.0, 10.0, 4.0, 4.0, 32, 32);
        assert_eq!(b, BoundingBox::new(8, 8, 4, 4));
    }

    #[test]
    fn serialises_as_array() {
        let s = serde_json::to_string(&BoundingBox::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
    }
}
