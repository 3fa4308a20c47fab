//! Finite-difference checks of the analytic gradients.
//!
//! Errors are relative per element, `|a − n| / max(|a|, |n|, 1e-6)`, and each
//! group reports its worst element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defpool::{defpool_backward, defpool_forward, DefPoolConfig, PenaltyBasis};
use crate::error::Result;
use crate::net::{Architecture, BranchSpec, ConvSpec, Network, Pooling};
use crate::tensor::Tensor;

pub const DEFPOOL_THRESHOLD: f64 = 1e-6;
pub const NETWORK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupError::passed)
    }
}

/// Options for [`run_gradcheck`]. `corrupt` scales every analytic gradient
/// by 1.01 so callers can confirm the check actually fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub eps: f64,
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: 1e-5,
            corrupt: false,
        }
    }
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn central(eps: f64, x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + eps;
    let up = f(x)?;
    x[i] = orig - eps;
    let down = f(x)?;
    x[i] = orig;
    Ok((up - down) / (2.0 * eps))
}

fn random_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks coefficient and input gradients over `R ∈ {0,1,2}`, `s ∈ {1,2,3}`,
/// `N ∈ {1,4}` with random tables, coefficients and maps. The loss is
/// `Σ g ⊙ b` for a random `g`.
pub fn defpool_gradcheck(opts: &GradcheckOptions) -> Result<Vec<GroupError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = if opts.corrupt { 1.01 } else { 1.0 };
    let mut out = Vec::new();
    for radius in 0..=2usize {
        for stride in 1..=3usize {
            for n in [1usize, 4] {
                let channels = 2;
                let side = 2 * radius + 1;
                let tables = (0..n).map(|_| (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
                let basis = PenaltyBasis::new(radius, tables)?;
                let coeffs: Vec<Vec<f64>> =
                    (0..channels).map(|_| (0..n).map(|_| rng.gen_range(-0.5..1.0)).collect()).collect();
                let cfg = DefPoolConfig::shared(stride, stride, basis, coeffs)?;
                let m = random_map(&mut rng, &[channels, 7, 8]);
                let (b, rec) = defpool_forward(&m, &cfg)?;
                let g = random_map(&mut rng, b.shape());
                let (gin, gcoef) = defpool_backward(&g, &rec, &cfg)?;
                let dot = |t: &Tensor| t.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
                let name = format!("defpool.R{radius}.s{stride}.N{n}");

                let mut x = m.data().to_vec();
                let numeric = (0..x.len())
                    .map(|i| {
                        central(opts.eps, &mut x, i, |v| {
                            Ok(dot(&defpool_forward(&Tensor::new(m.shape().to_vec(), v.to_vec())?, &cfg)?.0))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let analytic: Vec<f64> = gin.data().iter().map(|v| v * scale).collect();
                out.push(GroupError {
                    group: format!("{name}.input"),
                    max_rel_err: max_rel_err(&analytic, &numeric),
                    threshold: DEFPOOL_THRESHOLD,
                });

                let mut a = cfg.coeffs_flat().to_vec();
                let numeric = (0..a.len())
                    .map(|i| {
                        central(opts.eps, &mut a, i, |v| {
                            let mut c = cfg.clone();
                            c.coeffs_flat_mut().copy_from_slice(v);
                            Ok(dot(&defpool_forward(&m, &c)?.0))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let analytic: Vec<f64> = gcoef.iter().flatten().map(|v| v * scale).collect();
                out.push(GroupError {
                    group: format!("{name}.coeffs"),
                    max_rel_err: max_rel_err(&analytic, &numeric),
                    threshold: DEFPOOL_THRESHOLD,
                });
            }
        }
    }
    Ok(out)
}

/// Two convolutions, one def-pooling branch and the linear head on a
/// 1×12×12 input.
pub fn gradcheck_architecture() -> Architecture {
    Architecture {
        input: [1, 12, 12],
        trunk: vec![ConvSpec {
            filters: 4,
            size: 3,
            pool: None,
        }],
        branches: vec![BranchSpec {
            part_size: 3,
            parts: 3,
            radius: 1,
            stride: 2,
        }],
        pooling: Pooling::Def,
        classes: 3,
    }
}

/// Every parameter group of [`gradcheck_architecture`] with non-zero random
/// penalty coefficients; the loss is a random linear function of the scores.
pub fn network_gradcheck(opts: &GradcheckOptions) -> Result<Vec<GroupError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut net = Network::new(&gradcheck_architecture(), opts.seed)?;
    let mut params = net.params();
    for (name, group) in net.param_names().iter().zip(params.iter_mut()) {
        // Random coefficients and biases so no group sits at a special point.
        if name.ends_with("coeffs") || name.ends_with("bias") {
            group.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.5));
        }
    }
    net.set_params(&params)?;
    let image = random_map(&mut rng, &[1, 12, 12]);
    let g: Vec<f64> = (0..net.classes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pass = net.forward_cached(&image)?;
    let (grads, _) = net.backward(&pass, &g)?;
    let scale = if opts.corrupt { 1.01 } else { 1.0 };

    let names = net.param_names();
    let mut probe = net.clone();
    let mut out = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let mut group = params[gi].clone();
        let mut numeric = Vec::with_capacity(group.len());
        for i in 0..group.len() {
            numeric.push(central(opts.eps, &mut group, i, |v| {
                let mut p = params.clone();
                p[gi] = v.to_vec();
                probe.set_params(&p)?;
                Ok(probe.forward(&image)?.iter().zip(&g).map(|(s, w)| s * w).sum())
            })?);
        }
        let analytic: Vec<f64> = grads[gi].iter().map(|v| v * scale).collect();
        out.push(GroupError {
            group: name.clone(),
            max_rel_err: max_rel_err(&analytic, &numeric),
            threshold: NETWORK_THRESHOLD,
        });
    }
    Ok(out)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut groups = defpool_gradcheck(opts)?;
    groups.extend(network_gradcheck(opts)?);
    Ok(GradcheckReport {
        seed: opts.seed,
        eps: opts.eps,
        groups,
    })
}
