#![allow(dead_code)]

//! Brute-force references written without any of the library's pooling code.

use defnet::{DefPoolConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerates every offset at every anchor in `(δy, δx)` order, skipping
/// out-of-map positions and infinite penalties; keeps the first strict max.
pub fn defpool_oracle(m: &Tensor, cfg: &DefPoolConfig) -> Option<Tensor> {
    let (c_n, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let (oh, ow) = (h / cfg.sy, w / cfg.sx);
    let r = cfg.radius() as isize;
    let mut out = Vec::with_capacity(c_n * oh * ow);
    for c in 0..c_n {
        let basis = cfg.basis(c);
        let a = cfg.coeffs(c);
        for y in 0..oh {
            for x in 0..ow {
                let mut best: Option<f64> = None;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let row = (cfg.sy * y) as isize + dy;
                        let col = (cfg.sx * x) as isize + dx;
                        if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
                            continue;
                        }
                        let mut penalty = 0.0;
                        let mut forbidden = false;
                        for (n, an) in a.iter().enumerate() {
                            let d = basis.get(n, dx, dy);
                            if d.is_infinite() {
                                forbidden = true;
                            } else {
                                penalty += an * d;
                            }
                        }
                        if forbidden {
                            continue;
                        }
                        let v = m.data()[(c * h + row as usize) * w + col as usize] - penalty;
                        if best.is_none_or(|b| v > b) {
                            best = Some(v);
                        }
                    }
                }
                out.push(best?);
            }
        }
    }
    Some(Tensor::new(vec![c_n, oh, ow], out).unwrap())
}

/// Max over the `(2k+1)²` window centred on each anchor `(s·y, s·x)`,
/// clipped to the map.
pub fn centred_window_max(m: &Tensor, k: usize, s: usize) -> Tensor {
    let (c_n, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::new();
    for c in 0..c_n {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for i in (s * y).saturating_sub(k)..=(s * y + k).min(h - 1) {
                    for j in (s * x).saturating_sub(k)..=(s * x + k).min(w - 1) {
                        best = best.max(m.data()[(c * h + i) * w + j]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![c_n, oh, ow], out).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
