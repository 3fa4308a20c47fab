//! Ridge regression of box offsets from pooled trunk features.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use super::data::{crop_resize, SyntheticScene};
use super::proposals::propose_boxes;
use crate::error::{dim_err, param_err, Result};
use crate::net::Network;
use crate::tensor::{max_pool_centered, Tensor};

/// Offsets `(dx, dy, dlog w, dlog h)` that move `from` onto `to`.
pub fn box_targets(from: &BoundingBox, to: &BoundingBox) -> [f64; 4] {
    let ((fx, fy), (tx, ty)) = (from.center(), to.center());
    let (fw, fh) = (from.w as f64, from.h as f64);
    [
        (tx - fx) / fw,
        (ty - fy) / fh,
        (to.w as f64 / fw).ln(),
        (to.h as f64 / fh).ln(),
    ]
}

pub fn apply_offsets(b: &BoundingBox, t: &[f64; 4], width: usize, height: usize) -> BoundingBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.w as f64, b.h as f64);
    BoundingBox::from_center(cx + t[0] * w, cy + t[1] * h, w * t[2].exp(), h * t[3].exp(), width, height)
}

/// Trunk output of the box crop, max-pooled once more to keep the feature
/// count small.
pub fn regression_features(net: &Network, image: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>> {
    let side = net.architecture().input[1];
    let t = net.trunk_features(&crop_resize(image, bbox, side))?;
    Ok(max_pool_centered(&t, 1, 2)?.0.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    /// Four rows of `features + 1` coefficients; the last is the intercept.
    pub weights: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl BoxRegressor {
    /// Solves `(XᵀX + λI) W = XᵀY` (intercept unpenalised). If the system is
    /// not positive definite, λ is raised tenfold until it is.
    pub fn fit(xs: &[Vec<f64>], targets: &[[f64; 4]], lambda: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(param_err!("{} feature rows for {} targets", xs.len(), targets.len()));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(dim_err!("ragged regression features"));
        }
        let n = xs.len();
        let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { xs[i][j] } else { 1.0 });
        let y = DMatrix::from_fn(n, 4, |i, j| targets[i][j]);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        let mut lam = lambda.max(1e-12);
        loop {
            let mut a = xtx.clone();
            for j in 0..d {
                a[(j, j)] += lam;
            }
            // A tiny ridge on the intercept keeps an all-zero design solvable.
            a[(d, d)] += 1e-12;
            if let Some(chol) = a.cholesky() {
                let w = chol.solve(&xty);
                let weights = (0..4).map(|r| w.column(r).iter().copied().collect()).collect();
                return Ok(Self { weights, lambda: lam });
            }
            warn!("ridge system singular at lambda {lam}; raising");
            lam *= 10.0;
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<[f64; 4]> {
        let d = self.weights[0].len() - 1;
        if x.len() != d {
            return Err(dim_err!("regressor expects {d} features, got {}", x.len()));
        }
        let xv = DVector::from_iterator(d + 1, x.iter().copied().chain([1.0]));
        let mut out = [0.0; 4];
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = DVector::from_column_slice(w).dot(&xv);
        }
        Ok(out)
    }

    /// Fits on every proposal whose best overlap with an object is ≥ `min_iou`.
    pub fn train_on_scenes(net: &Network, scenes: &[SyntheticScene], min_iou: f64, lambda: f64) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for scene in scenes {
            let (w, h) = scene.size();
            for b in propose_boxes(w, h) {
                let best = scene
                    .objects
                    .iter()
                    .map(|o| (o.bbox.iou(&b), o.bbox))
                    .fold(None, |acc: Option<(f64, BoundingBox)>, cur| match acc {
                        Some(a) if a.0 >= cur.0 => Some(a),
                        _ => Some(cur),
                    });
                if let Some((iou, gt)) = best {
                    if iou >= min_iou {
                        xs.push(regression_features(net, &scene.image, &b)?);
                        ts.push(box_targets(&b, &gt));
                    }
                }
            }
        }
        Self::fit(&xs, &ts, lambda)
    }
}
