//! Dense row-major `f64` tensors and the handful of kernels the network needs:
//! valid 2-D convolution, block max-pooling with argmax routing, and a
//! bit-exact binary file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"DPTENSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("tensor dimensions must be >= 1");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(dim_err!("expected a [C,H,W] tensor, got {:?}", self.shape)),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, i: usize, j: usize) -> &mut f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[(c * h + i) * w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (channels, h, w) = self.dims3()?;
        if c >= channels {
            return Err(dim_err!("channel {} out of range {}", c, channels));
        }
        let plane = h * w;
        Tensor::new(vec![1, h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.rank() + 8 * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let magic = take(&mut cursor, 8)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rank = read_u32(&mut cursor)? as usize;
        if rank == 0 {
            return Err(Error::Format("rank must be at least 1".into()));
        }
        // Guards against absurd ranks before allocating.
        if cursor.len() < rank * 4 {
            return Err(Error::Format("truncated header".into()));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut cursor).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Format(format!("zero dimension in {shape:?}")));
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        if len.checked_mul(8) != Some(cursor.len()) {
            return Err(Error::Format(format!(
                "header declares {} values but payload holds {} bytes",
                len,
                cursor.len()
            )));
        }
        let data = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(dim_err!("all dimensions must be >= 1, got {:?}", shape));
    }
    Ok(())
}

fn take<'a>(cursor: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(Error::Format("truncated header".into()));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

/// A bank of `K` filters of shape `[C, kh, kw]` plus one bias per filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilterBank {
    pub filters: Tensor,
    pub bias: Vec<f64>,
}

impl ConvFilterBank {
    pub fn new(filters: Tensor, bias: Vec<f64>) -> Result<Self> {
        if filters.rank() != 4 {
            return Err(dim_err!("filters must be [K,C,kh,kw], got {:?}", filters.shape()));
        }
        if bias.len() != filters.shape()[0] {
            return Err(dim_err!(
                "{} filters but {} biases",
                filters.shape()[0],
                bias.len()
            ));
        }
        Ok(Self { filters, bias })
    }

    /// `(K, C, kh, kw)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.filters.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 3]> {
        let (k, c, kh, kw) = self.dims();
        match *input {
            [ic, h, w] if ic == c && kh <= h && kw <= w => Ok([k, h - kh + 1, w - kw + 1]),
            _ => Err(dim_err!(
                "filter bank [{k},{c},{kh},{kw}] cannot convolve input {:?}",
                input
            )),
        }
    }
}

/// Valid cross-correlation: `out[k,i,j] = bias[k] + Σ input[c,i+u,j+v]·filters[k,c,u,v]`.
pub fn conv2d(input: &Tensor, bank: &ConvFilterBank) -> Result<Tensor> {
    let [k_out, oh, ow] = bank.output_shape(input.shape())?;
    let (_, c_in, kh, kw) = bank.dims();
    let (_, h, w) = input.dims3()?;
    let x = input.data();
    let f = bank.filters.data();
    let mut out = vec![0.0; k_out * oh * ow];
    for k in 0..k_out {
        let plane = &mut out[k * oh * ow..(k + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bank.bias[k]);
        for c in 0..c_in {
            for u in 0..kh {
                for v in 0..kw {
                    let wt = f[((k * c_in + c) * kh + u) * kw + v];
                    for i in 0..oh {
                        let src = &x[(c * h + i + u) * w + v..][..ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![k_out, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, filters and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, bank: &ConvFilterBank, grad_out: &Tensor) -> Result<ConvGrads> {
    let out_shape = bank.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(dim_err!(
            "grad_out {:?} does not match conv output {:?}",
            grad_out.shape(),
            out_shape
        ));
    }
    let [k_out, oh, ow] = out_shape;
    let (_, c_in, kh, kw) = bank.dims();
    let (_, h, w) = input.dims3()?;
    let x = input.data();
    let f = bank.filters.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gf = vec![0.0; f.len()];
    let mut gb = vec![0.0; k_out];
    for k in 0..k_out {
        let gplane = &g[k * oh * ow..(k + 1) * oh * ow];
        gb[k] = gplane.iter().sum();
        for c in 0..c_in {
            for u in 0..kh {
                for v in 0..kw {
                    let fi = ((k * c_in + c) * kh + u) * kw + v;
                    let wt = f[fi];
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let row = (c * h + i + u) * w + v;
                        let grow = &gplane[i * ow..(i + 1) * ow];
                        for (s, gv) in x[row..row + ow].iter().zip(grow) {
                            acc += s * gv;
                        }
                        for (d, gv) in gx[row..row + ow].iter_mut().zip(grow) {
                            *d += wt * gv;
                        }
                    }
                    gf[fi] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        filters: Tensor::new(bank.filters.shape().to_vec(), gf)?,
        bias: gb,
    })
}

/// Flat source index of the maximum chosen for each pooled output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Block max-pooling: output `(i,j)` is the max over rows `stride·i .. stride·i+k`
/// and columns `stride·j .. stride·j+k`. Ties resolve to the first element in
/// row-major scan order.
pub fn max_pool(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    if k < 1 || stride < 1 {
        return Err(param_err!("kernel {k} and stride {stride} must be >= 1"));
    }
    let (c, h, w) = input.dims3()?;
    if k > h || k > w {
        return Err(dim_err!("kernel {k} larger than {h}x{w} map"));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    pool_with(input, [c, oh, ow], |oi, oj| {
        let (r0, c0) = (oi * stride, oj * stride);
        (r0..r0 + k, c0..c0 + k)
    })
}

/// Max-pooling over a `(2·radius+1)` window centred on each anchor
/// `(stride·i, stride·j)`, with positions outside the map excluded. Output is
/// `floor(H/stride) × floor(W/stride)`.
pub fn max_pool_centered(input: &Tensor, radius: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    if stride < 1 {
        return Err(param_err!("stride must be >= 1"));
    }
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h / stride, w / stride);
    if oh == 0 || ow == 0 {
        return Err(dim_err!("stride {stride} exceeds {h}x{w} map"));
    }
    pool_with(input, [c, oh, ow], |oi, oj| {
        let (ai, aj) = (oi * stride, oj * stride);
        (
            ai.saturating_sub(radius)..(ai + radius + 1).min(h),
            aj.saturating_sub(radius)..(aj + radius + 1).min(w),
        )
    })
}

fn pool_with(
    input: &Tensor,
    out_shape: [usize; 3],
    window: impl Fn(usize, usize) -> (std::ops::Range<usize>, std::ops::Range<usize>),
) -> Result<(Tensor, PoolIndices)> {
    let [c_n, oh, ow] = out_shape;
    let (_, h, w) = input.dims3()?;
    let x = input.data();
    let mut out = Vec::with_capacity(c_n * oh * ow);
    let mut argmax = Vec::with_capacity(c_n * oh * ow);
    for c in 0..c_n {
        for oi in 0..oh {
            for oj in 0..ow {
                let (rows, cols) = window(oi, oj);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for r in rows {
                    for col in cols.clone() {
                        let idx = (c * h + r) * w + col;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let indices = PoolIndices {
        input_shape: input.shape().to_vec(),
        output_shape: out_shape.to_vec(),
        argmax,
    };
    Ok((Tensor::new(out_shape.to_vec(), out)?, indices))
}

/// Routes each output gradient to the input element that won the max.
pub fn max_pool_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.shape() != indices.output_shape.as_slice() {
        return Err(dim_err!(
            "grad_out {:?} vs pooled {:?}",
            grad_out.shape(),
            indices.output_shape
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&idx, &go) in indices.argmax.iter().zip(grad_out.data()) {
        g[idx] += go;
    }
    Ok(grad)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.same_shape(grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}
