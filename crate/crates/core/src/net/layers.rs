use serde::{Deserialize, Serialize};

use crate::defpool::{defpool_backward, defpool_forward, ArgmaxRecord, DefPoolConfig};
use crate::error::{dim_err, Result};
use crate::tensor::{
    conv2d, conv2d_backward, max_pool_backward, max_pool_centered, relu, relu_backward, ConvFilterBank,
    PoolIndices, Tensor,
};

/// What a parameter group is, for weight decay and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Penalty,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvFilterBank),
    Relu,
    /// Centred window max-pooling; see [`max_pool_centered`].
    MaxPool { radius: usize, stride: usize },
    DefPool(DefPoolConfig),
}

#[derive(Debug, Clone)]
pub enum Cache {
    Conv(Tensor),
    Relu(Tensor),
    MaxPool(PoolIndices),
    DefPool(ArgmaxRecord),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::DefPool(_) => "defpool",
        }
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match self {
            Layer::Conv(bank) => bank.output_shape(&input),
            Layer::Relu => Ok(input),
            Layer::MaxPool { stride, .. } => {
                let (oh, ow) = (h / stride, w / stride);
                if *stride == 0 || oh == 0 || ow == 0 {
                    return Err(dim_err!("max-pool stride {stride} does not fit {h}x{w}"));
                }
                Ok([c, oh, ow])
            }
            Layer::DefPool(cfg) => {
                let (oh, ow) = cfg.output_dims(h, w);
                if cfg.channels() != c || oh == 0 || ow == 0 {
                    return Err(dim_err!("def-pooling config does not fit input {:?}", input));
                }
                Ok([c, oh, ow])
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        Ok(match self {
            Layer::Conv(bank) => (conv2d(x, bank)?, Cache::Conv(x.clone())),
            Layer::Relu => (relu(x), Cache::Relu(x.clone())),
            Layer::MaxPool { radius, stride } => {
                let (y, idx) = max_pool_centered(x, *radius, *stride)?;
                (y, Cache::MaxPool(idx))
            }
            Layer::DefPool(cfg) => {
                let (y, rec) = defpool_forward(x, cfg)?;
                (y, Cache::DefPool(rec))
            }
        })
    }

    /// Evaluation-only forward without keeping caches.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Layer::Conv(bank) => conv2d(x, bank)?,
            Layer::Relu => relu(x),
            Layer::MaxPool { radius, stride } => max_pool_centered(x, *radius, *stride)?.0,
            Layer::DefPool(cfg) => defpool_forward(x, cfg)?.0,
        })
    }

    /// Returns the input gradient and one gradient vector per parameter group,
    /// in the order of [`Layer::visit_params`].
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        match (self, cache) {
            (Layer::Conv(bank), Cache::Conv(x)) => {
                let g = conv2d_backward(x, bank, grad_out)?;
                Ok((g.input, vec![g.filters.into_data(), g.bias]))
            }
            (Layer::Relu, Cache::Relu(x)) => Ok((relu_backward(x, grad_out)?, vec![])),
            (Layer::MaxPool { .. }, Cache::MaxPool(idx)) => Ok((max_pool_backward(grad_out, idx)?, vec![])),
            (Layer::DefPool(cfg), Cache::DefPool(rec)) => {
                let (gi, ga) = defpool_backward(grad_out, rec, cfg)?;
                let groups = if cfg.is_learnable() { vec![ga.concat()] } else { vec![] };
                Ok((gi, groups))
            }
            _ => Err(dim_err!("cache does not belong to a {} layer", self.name())),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        match self {
            Layer::Conv(bank) => {
                f("filters", ParamKind::Weight, bank.filters.data());
                f("bias", ParamKind::Bias, &bank.bias);
            }
            Layer::DefPool(cfg) if cfg.is_learnable() => f("coeffs", ParamKind::Penalty, cfg.coeffs_flat()),
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        match self {
            Layer::Conv(bank) => {
                f("filters", ParamKind::Weight, bank.filters.data_mut());
                f("bias", ParamKind::Bias, &mut bank.bias);
            }
            Layer::DefPool(cfg) if cfg.is_learnable() => f("coeffs", ParamKind::Penalty, cfg.coeffs_flat_mut()),
            _ => {}
        }
    }
}

/// An ordered chain of layers whose shapes were checked to compose.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|e| dim_err!("layer {i} ({}): {e}", layer.name()))?;
        }
        Ok(Self {
            input_shape,
            output_shape: shape,
            layers,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(dim_err!("stack expects {:?}, got {:?}", self.input_shape, x.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.apply(&cur)?;
        }
        Ok(cur)
    }

    /// Parameter-group gradients come back in forward layer order.
    pub fn backward(&self, caches: &[Cache], grad_out: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        if caches.len() != self.layers.len() {
            return Err(dim_err!("{} caches for {} layers", caches.len(), self.layers.len()));
        }
        let mut grad = grad_out.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (g, groups) = layer.backward(cache, &grad)?;
            per_layer.push(groups);
            grad = g;
        }
        Ok((grad, per_layer.into_iter().rev().flatten().collect()))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&mut |name, kind, p| f(&format!("{prefix}.{i}.{}.{name}", layer.name()), kind, p));
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lname = layer.name();
            layer.visit_params_mut(&mut |name, kind, p| f(&format!("{prefix}.{i}.{lname}.{name}"), kind, p));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defpool::make_maxpool_basis;

    #[test]
    fn shapes_must_compose() {
        let bank = ConvFilterBank::new(Tensor::zeros(&[4, 1, 3, 3]), vec![0.0; 4]).unwrap();
        let ok = LayerStack::new(
            [1, 8, 8],
            vec![Layer::Conv(bank.clone()), Layer::Relu, Layer::MaxPool { radius: 1, stride: 2 }],
        )
        .unwrap();
        assert_eq!(ok.output_shape(), [4, 3, 3]);
        let bad = LayerStack::new([1, 8, 8], vec![Layer::Conv(bank.clone()), Layer::Conv(bank)]);
        assert!(bad.is_err());
        let bad = LayerStack::new([2, 8, 8], vec![Layer::DefPool(make_maxpool_basis(1, 3))]);
        assert!(bad.is_err());
    }

    #[test]
    fn maxpool_basis_layer_equals_maxpool_layer() {
        let x = Tensor::from_fn(&[3, 9, 7], |k| ((k * 31) % 13) as f64 - 6.0);
        let a = Layer::MaxPool { radius: 2, stride: 2 };
        let b = Layer::DefPool(make_maxpool_basis(2, 3).with_stride(2, 2).unwrap());
        let (ya, ca) = a.forward(&x).unwrap();
        let (yb, cb) = b.forward(&x).unwrap();
        assert_eq!(ya, yb);
        let g = Tensor::from_fn(ya.shape(), |k| k as f64 * 0.5);
        assert_eq!(a.backward(&ca, &g).unwrap().0, b.backward(&cb, &g).unwrap().0);
        // The max-pool basis is fixed, so it exposes no parameters.
        assert!(b.backward(&cb, &g).unwrap().1.is_empty());
    }
}
