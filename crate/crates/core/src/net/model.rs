use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, LayerStack, ParamKind};
use super::loss::hinge_loss;
use crate::defpool::{make_maxpool_basis, DefPoolConfig, PenaltyBasis};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::{ConvFilterBank, Tensor};

/// How each part-filter branch pools its part detection maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Plain centred max-pooling.
    Max,
    /// Def-pooling with learnable directional penalties.
    Def,
    /// Def-pooling with the fixed max-pool basis; equivalent to `Max`.
    DefMaxBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub radius: usize,
    pub stride: usize,
}

/// Convolution followed by `max(0, ·)` and an optional max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub pool: Option<PoolSpec>,
}

/// A bank of part filters whose maps are pooled and fed to the class head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub part_size: usize,
    pub parts: usize,
    pub radius: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub trunk: Vec<ConvSpec>,
    pub branches: Vec<BranchSpec>,
    pub pooling: Pooling,
    pub classes: usize,
}

impl Architecture {
    /// The small network used throughout the pipeline: two conv layers (8 and
    /// 16 filters) with a max-pool in between, then 3×3, 5×5 and 7×7 part
    /// filters, each pooled and read out by a single linear head.
    pub fn toy(classes: usize, pooling: Pooling) -> Self {
        Self {
            input: [1, 28, 28],
            trunk: vec![
                ConvSpec {
                    filters: 8,
                    size: 3,
                    pool: Some(PoolSpec { radius: 1, stride: 2 }),
                },
                ConvSpec {
                    filters: 16,
                    size: 3,
                    pool: None,
                },
            ],
            branches: [3, 5, 7]
                .into_iter()
                .map(|part_size| BranchSpec {
                    part_size,
                    parts: 6,
                    radius: 2,
                    stride: 2,
                })
                .collect(),
            pooling,
            classes,
        }
    }

    /// Same trunk with the head reading the flattened trunk output directly.
    pub fn trunk_only(&self, classes: usize) -> Self {
        Self {
            branches: vec![],
            classes,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HingeHead {
    /// `[classes, features]`
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl HingeHead {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.features() {
            return Err(dim_err!("head expects {} features, got {}", self.features(), features.len()));
        }
        let f = self.features();
        Ok(self
            .weights
            .data()
            .chunks(f)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>())
            .collect())
    }
}

/// Intermediate state from [`Network::forward_cached`] needed by the backward pass.
pub struct ForwardPass {
    trunk_caches: Vec<Cache>,
    branch_caches: Vec<Vec<Cache>>,
    features: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Gradient groups in [`Network::visit_params`] order.
pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    trunk: LayerStack,
    branches: Vec<LayerStack>,
    head: HingeHead,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (3.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn conv_bank(rng: &mut ChaCha8Rng, k: usize, c: usize, size: usize) -> Result<ConvFilterBank> {
    let fan_in = c * size * size;
    let filters = Tensor::new(vec![k, c, size, size], uniform(rng, k * fan_in, fan_in))?;
    ConvFilterBank::new(filters, vec![0.0; k])
}

/// Starting value of every learnable penalty coefficient: a mild L1 cost on
/// displacement along each axis direction.
pub const PENALTY_INIT: f64 = 0.1;

impl Network {
    /// Fan-in scaled uniform weights, zero biases, penalty coefficients at
    /// [`PENALTY_INIT`].
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.classes == 0 {
            return Err(param_err!("at least one class required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut channels = arch.input[0];
        for spec in &arch.trunk {
            layers.push(Layer::Conv(conv_bank(&mut rng, spec.filters, channels, spec.size)?));
            layers.push(Layer::Relu);
            if let Some(p) = spec.pool {
                layers.push(Layer::MaxPool {
                    radius: p.radius,
                    stride: p.stride,
                });
            }
            channels = spec.filters;
        }
        let trunk = LayerStack::new(arch.input, layers)?;
        let trunk_shape = trunk.output_shape();

        let mut branches = Vec::new();
        for spec in &arch.branches {
            let bank = conv_bank(&mut rng, spec.parts, trunk_shape[0], spec.part_size)?;
            let pool = match arch.pooling {
                Pooling::Max => Layer::MaxPool {
                    radius: spec.radius,
                    stride: spec.stride,
                },
                Pooling::Def => Layer::DefPool(DefPoolConfig::shared(
                    spec.stride,
                    spec.stride,
                    PenaltyBasis::axis_directions(spec.radius),
                    vec![vec![PENALTY_INIT; 4]; spec.parts],
                )?),
                Pooling::DefMaxBasis => {
                    Layer::DefPool(make_maxpool_basis(spec.radius, spec.parts).with_stride(spec.stride, spec.stride)?)
                }
            };
            branches.push(LayerStack::new(trunk_shape, vec![Layer::Conv(bank), pool])?);
        }

        let features = if branches.is_empty() {
            trunk.output_len()
        } else {
            branches.iter().map(LayerStack::output_len).sum()
        };
        let head = HingeHead {
            weights: Tensor::new(vec![arch.classes, features], uniform(&mut rng, arch.classes * features, features))?,
            bias: vec![0.0; arch.classes],
        };
        Ok(Self {
            arch: arch.clone(),
            trunk,
            branches,
            head,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn trunk(&self) -> &LayerStack {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut LayerStack {
        &mut self.trunk
    }

    pub fn branches(&self) -> &[LayerStack] {
        &self.branches
    }

    pub fn head(&self) -> &HingeHead {
        &self.head
    }

    pub fn trunk_features(&self, image: &Tensor) -> Result<Tensor> {
        self.trunk.apply(image)
    }

    fn branch_features(&self, trunk_out: &Tensor) -> Result<Vec<f64>> {
        if self.branches.is_empty() {
            return Ok(trunk_out.data().to_vec());
        }
        let mut features = Vec::with_capacity(self.head.features());
        for b in &self.branches {
            features.extend_from_slice(b.apply(trunk_out)?.data());
        }
        Ok(features)
    }

    /// Pooled part responses that feed the head.
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.branch_features(&self.trunk.apply(image)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.head.scores(&self.features(image)?)
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<ForwardPass> {
        let (trunk_out, trunk_caches) = self.trunk.forward(image)?;
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut features = Vec::with_capacity(self.head.features());
        if self.branches.is_empty() {
            features.extend_from_slice(trunk_out.data());
        }
        for b in &self.branches {
            let (y, caches) = b.forward(&trunk_out)?;
            features.extend_from_slice(y.data());
            branch_caches.push(caches);
        }
        let scores = self.head.scores(&features)?;
        Ok(ForwardPass {
            trunk_caches,
            branch_caches,
            features,
            scores,
        })
    }

    /// Parameter gradients and the image gradient given `∂L/∂scores`.
    pub fn backward(&self, pass: &ForwardPass, grad_scores: &[f64]) -> Result<(Grads, Tensor)> {
        if grad_scores.len() != self.classes() {
            return Err(dim_err!("{} score gradients for {} classes", grad_scores.len(), self.classes()));
        }
        let f = self.head.features();
        let mut gw = vec![0.0; self.classes() * f];
        let mut gfeat = vec![0.0; f];
        let w = self.head.weights.data();
        for (k, &gs) in grad_scores.iter().enumerate() {
            if gs == 0.0 {
                continue;
            }
            let row = &w[k * f..(k + 1) * f];
            for j in 0..f {
                gw[k * f + j] = gs * pass.features[j];
                gfeat[j] += gs * row[j];
            }
        }
        let gb = grad_scores.to_vec();

        let trunk_shape = self.trunk.output_shape();
        let mut branch_groups = Vec::new();
        let grad_trunk_out = if self.branches.is_empty() {
            Tensor::new(trunk_shape.to_vec(), gfeat)?
        } else {
            let mut acc = Tensor::zeros(&trunk_shape);
            let mut offset = 0;
            for (b, caches) in self.branches.iter().zip(&pass.branch_caches) {
                let n = b.output_len();
                let g = Tensor::new(b.output_shape().to_vec(), gfeat[offset..offset + n].to_vec())?;
                offset += n;
                let (gin, groups) = b.backward(caches, &g)?;
                acc.axpy(1.0, &gin)?;
                branch_groups.push(groups);
            }
            acc
        };
        let (grad_image, mut grads) = self.trunk.backward(&pass.trunk_caches, &grad_trunk_out)?;
        grads.extend(branch_groups.into_iter().flatten());
        grads.push(gw);
        grads.push(gb);
        Ok((grads, grad_image))
    }

    /// Hinge loss of one sample with its parameter gradients.
    pub fn loss_and_grads(&self, image: &Tensor, labels: &[f64]) -> Result<(f64, Grads)> {
        let pass = self.forward_cached(image)?;
        let (loss, gs) = hinge_loss(&pass.scores, labels)?;
        let (grads, _) = self.backward(&pass, &gs)?;
        Ok((loss, grads))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        self.trunk.visit_params("trunk", f);
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_params(&format!("branch{i}"), f);
        }
        f("head.weights", ParamKind::Weight, self.head.weights.data());
        f("head.bias", ParamKind::Bias, &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        self.trunk.visit_params_mut("trunk", f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params_mut(&format!("branch{i}"), f);
        }
        f("head.weights", ParamKind::Weight, self.head.weights.data_mut());
        f("head.bias", ParamKind::Bias, &mut self.head.bias);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _, _| names.push(n.to_string()));
        names
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, _, p| out.push(p.to_vec()));
        out
    }

    pub fn set_params(&mut self, groups: &[Vec<f64>]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_params_mut(&mut |name, _, p| {
            match groups.get(i) {
                Some(g) if g.len() == p.len() => p.copy_from_slice(g),
                _ => {
                    err.get_or_insert_with(|| dim_err!("parameter group {name} does not match"));
                }
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None if i != groups.len() => Err(dim_err!("{} groups for {} parameters", groups.len(), i)),
            None => Ok(()),
        }
    }

    /// `p ← p − rate·(g + decay·p)`, with decay applied to weights only.
    pub fn apply_gradients(&mut self, grads: &Grads, rate: f64, weight_decay: f64) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_params_mut(&mut |name, kind, p| {
            match grads.get(i) {
                Some(g) if g.len() == p.len() => {
                    let decay = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
                    for (v, gv) in p.iter_mut().zip(g) {
                        *v -= rate * (gv + decay * *v);
                    }
                }
                _ => {
                    err.get_or_insert_with(|| dim_err!("gradient group {name} does not match"));
                }
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    /// Copies trunk parameters from `other`, which must share the trunk layout.
    pub fn load_trunk_from(&mut self, other: &Network) -> Result<()> {
        if self.trunk.input_shape() != other.trunk.input_shape() || self.arch.trunk != other.arch.trunk {
            return Err(dim_err!("trunk layouts differ"));
        }
        self.trunk = other.trunk.clone();
        Ok(())
    }

    pub fn head_mut(&mut self) -> &mut HingeHead {
        &mut self.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch(pooling: Pooling) -> Architecture {
        Architecture {
            input: [1, 12, 12],
            trunk: vec![
                ConvSpec {
                    filters: 3,
                    size: 3,
                    pool: None,
                },
                ConvSpec {
                    filters: 4,
                    size: 3,
                    pool: None,
                },
            ],
            branches: vec![BranchSpec {
                part_size: 3,
                parts: 2,
                radius: 1,
                stride: 2,
            }],
            pooling,
            classes: 3,
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_scores() {
        let net = Network::new(&Architecture::toy(4, Pooling::Def), 1).unwrap();
        let scores = net.forward(&Tensor::zeros(&[1, 28, 28])).unwrap();
        assert_eq!(scores, vec![0.0; 4]);
    }

    #[test]
    fn deterministic_scores() {
        let net = Network::new(&Architecture::toy(4, Pooling::Def), 7).unwrap();
        let img = Tensor::from_fn(&[1, 28, 28], |k| ((k * 17) % 23) as f64 / 23.0);
        assert_eq!(net.forward(&img).unwrap(), net.forward(&img.clone()).unwrap());
        assert_eq!(net, Network::new(&Architecture::toy(4, Pooling::Def), 7).unwrap());
    }

    #[test]
    fn pooling_variants_share_initialisation() {
        let img = Tensor::from_fn(&[1, 28, 28], |k| ((k * 7) % 11) as f64 / 11.0 - 0.5);
        let a = Network::new(&Architecture::toy(4, Pooling::Max), 3).unwrap();
        let mut b = Network::new(&Architecture::toy(4, Pooling::Def), 3).unwrap();
        let c = Network::new(&Architecture::toy(4, Pooling::DefMaxBasis), 3).unwrap();
        let sa = a.forward(&img).unwrap();
        assert_eq!(sa, c.forward(&img).unwrap());
        assert_ne!(sa, b.forward(&img).unwrap());
        // With the penalties zeroed the def-pooling net is the max-pooling net.
        let mut p = b.params();
        for (name, group) in b.param_names().iter().zip(p.iter_mut()) {
            if name.ends_with("coeffs") {
                assert!(group.iter().all(|&v| v == PENALTY_INIT));
                group.fill(0.0);
            }
        }
        b.set_params(&p).unwrap();
        assert_eq!(sa, b.forward(&img).unwrap());
    }

    #[test]
    fn rejects_wrong_input() {
        let net = Network::new(&small_arch(Pooling::Def), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 10, 12])).is_err());
    }

    #[test]
    fn param_roundtrip() {
        let mut net = Network::new(&small_arch(Pooling::Def), 0).unwrap();
        let names = net.param_names();
        assert_eq!(
            names,
            [
                "trunk.0.conv.filters",
                "trunk.0.conv.bias",
                "trunk.2.conv.filters",
                "trunk.2.conv.bias",
                "branch0.0.conv.filters",
                "branch0.0.conv.bias",
                "branch0.1.defpool.coeffs",
                "head.weights",
                "head.bias"
            ]
        );
        let mut p = net.params();
        p[6][0] = 0.25;
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[..3]).is_err());
    }

    #[test]
    fn trunk_only_head_reads_trunk() {
        let arch = small_arch(Pooling::Max).trunk_only(5);
        let net = Network::new(&arch, 0).unwrap();
        assert_eq!(net.head().features(), 4 * 8 * 8);
        assert_eq!(net.forward(&Tensor::zeros(&[1, 12, 12])).unwrap().len(), 5);
    }
}
