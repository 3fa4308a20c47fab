//! Brute-force quadratic part-deformation score, kept deliberately separate
//! from [`crate::defpool`] so it can serve as ground truth for it.
//!
//! Coordinates are `(i, j) = (row, column)`.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDeformation {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    /// Anchor row.
    pub b1: usize,
    /// Anchor column.
    pub b2: usize,
}

impl QuadraticDeformation {
    /// Curvatures must be non-negative; a zero curvature is only meaningful
    /// with a zero linear term on the same axis.
    pub fn new(a1: f64, a2: f64, a3: f64, a4: f64, b1: usize, b2: usize) -> Result<Self> {
        let q = Self { a1, a2, a3, a4, b1, b2 };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.a1, self.a2, self.a3, self.a4].iter().any(|v| !v.is_finite()) {
            return Err(param_err!("coefficients must be finite"));
        }
        if self.a1 < 0.0 || self.a2 < 0.0 {
            return Err(param_err!("curvatures a1={} a2={} must be >= 0", self.a1, self.a2));
        }
        if (self.a1 == 0.0 && self.a3 != 0.0) || (self.a2 == 0.0 && self.a4 != 0.0) {
            return Err(param_err!("linear term without curvature has no vertex"));
        }
        Ok(())
    }

    /// `a5 = a3²/(4·a1) + a4²/(4·a2)`.
    pub fn a5(&self) -> Result<f64> {
        if self.a1 <= 0.0 || self.a2 <= 0.0 {
            return Err(param_err!("a5 needs a1 > 0 and a2 > 0"));
        }
        Ok(self.a3 * self.a3 / (4.0 * self.a1) + self.a4 * self.a4 / (4.0 * self.a2))
    }

    fn check_map(&self, m: &Tensor) -> Result<(usize, usize)> {
        self.validate()?;
        let (c, h, w) = m.dims3()?;
        if c != 1 {
            return Err(param_err!("expected a single part map, got {c} channels"));
        }
        if self.b1 >= h || self.b2 >= w {
            return Err(param_err!("anchor ({}, {}) outside {h}x{w} map", self.b1, self.b2));
        }
        Ok((h, w))
    }
}

/// Vertex form: `m − a1(i − b1 + a3/2a1)² − a2(j − b2 + a4/2a2)²`.
pub fn dpm_penalized_map(m: &Tensor, q: &QuadraticDeformation) -> Result<Tensor> {
    let (h, w) = q.check_map(m)?;
    let mut out = m.clone();
    for i in 0..h {
        for j in 0..w {
            let row_cost = if q.a1 == 0.0 {
                0.0
            } else {
                let t = i as f64 - q.b1 as f64 + q.a3 / (2.0 * q.a1);
                q.a1 * t * t
            };
            let col_cost = if q.a2 == 0.0 {
                0.0
            } else {
                let t = j as f64 - q.b2 as f64 + q.a4 / (2.0 * q.a2);
                q.a2 * t * t
            };
            *out.at3_mut(0, i, j) = m.at3(0, i, j) - row_cost - col_cost;
        }
    }
    Ok(out)
}

/// Expanded form: `m − a1·d1 − a2·d2 − a3·d3 − a4·d4 − a5` with
/// `d1 = (i−b1)²`, `d2 = (j−b2)²`, `d3 = i−b1`, `d4 = j−b2`.
pub fn dpm_penalized_map_expanded(m: &Tensor, q: &QuadraticDeformation) -> Result<Tensor> {
    let (h, w) = q.check_map(m)?;
    // A zero-curvature axis has a zero linear term (validated), so it adds nothing.
    let half = |lin: f64, curv: f64| if curv == 0.0 { 0.0 } else { lin * lin / (4.0 * curv) };
    let a5 = half(q.a3, q.a1) + half(q.a4, q.a2);
    let mut out = m.clone();
    for i in 0..h {
        for j in 0..w {
            let di = i as f64 - q.b1 as f64;
            let dj = j as f64 - q.b2 as f64;
            let v = m.at3(0, i, j) - q.a1 * di * di - q.a2 * dj * dj - q.a3 * di - q.a4 * dj - a5;
            *out.at3_mut(0, i, j) = v;
        }
    }
    Ok(out)
}

/// Best placement score: the maximum of the penalised map.
pub fn dpm_score(m: &Tensor, q: &QuadraticDeformation) -> Result<f64> {
    let pm = dpm_penalized_map(m, q)?;
    let mut best = f64::NEG_INFINITY;
    for &v in pm.data() {
        if v > best {
            best = v;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[1, h, w], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn zero_cost_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(5, 6, &mut rng);
        let q = QuadraticDeformation::new(0.0, 0.0, 0.0, 0.0, 2, 3).unwrap();
        assert_eq!(dpm_penalized_map(&m, &q).unwrap(), m);
        assert_eq!(dpm_penalized_map_expanded(&m, &q).unwrap(), m);
    }

    #[test]
    fn vertex_has_no_penalty() {
        let m = Tensor::filled(&[1, 7, 7], 1.0);
        // Vertex at (3 − 2/(2·1), 4 + 1/(2·0.5)) = (2, 5).
        let q = QuadraticDeformation::new(1.0, 0.5, 2.0, -1.0, 3, 4).unwrap();
        let pm = dpm_penalized_map(&m, &q).unwrap();
        assert_eq!(pm.at3(0, 2, 5), 1.0);
        assert_eq!(dpm_score(&m, &q).unwrap(), 1.0);
    }

    #[test]
    fn vertex_and_expanded_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = random_map(7, 7, &mut rng);
            let q = QuadraticDeformation::new(
                rng.gen_range(0.05..2.0),
                rng.gen_range(0.05..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0..7),
                rng.gen_range(0..7),
            )
            .unwrap();
            let a = dpm_penalized_map(&m, &q).unwrap();
            let b = dpm_penalized_map_expanded(&m, &q).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn constant_map_zero_penalty() {
        let m = Tensor::filled(&[1, 4, 4], -3.25);
        let q = QuadraticDeformation::new(0.0, 0.0, 0.0, 0.0, 0, 0).unwrap();
        assert_eq!(dpm_score(&m, &q).unwrap(), -3.25);
    }

    #[test]
    fn stiff_part_scores_its_anchor() {
        let mut m = Tensor::zeros(&[1, 6, 6]);
        *m.at3_mut(0, 4, 1) = 1.0;
        let q = QuadraticDeformation::new(1e9, 1e9, 0.0, 0.0, 4, 1).unwrap();
        assert!((dpm_score(&m, &q).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_shifts_with_map_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(6, 5, &mut rng);
        let q = QuadraticDeformation::new(0.3, 0.7, 0.1, -0.4, 1, 2).unwrap();
        let base = dpm_score(&m, &q).unwrap();
        let shifted = dpm_score(&m.map(|v| v + 4.0), &q).unwrap();
        assert!((shifted - base - 4.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_errors() {
        assert!(QuadraticDeformation::new(-1.0, 1.0, 0.0, 0.0, 0, 0).is_err());
        assert!(QuadraticDeformation::new(0.0, 1.0, 1.0, 0.0, 0, 0).is_err());
        let q = QuadraticDeformation::new(0.0, 1.0, 0.0, 0.0, 0, 0).unwrap();
        assert!(q.a5().is_err());
        let q = QuadraticDeformation::new(1.0, 1.0, 0.0, 0.0, 9, 0).unwrap();
        assert!(dpm_score(&Tensor::zeros(&[1, 3, 3]), &q).is_err());
    }
}
