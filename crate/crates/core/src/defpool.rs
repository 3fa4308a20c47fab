//! Deformation-constrained pooling.
//!
//! For channel `c` and output cell `(x, y)` the layer looks at every offset
//! `(δx, δy)` in `[-R, R]²` around the anchor `(sx·x, sy·y)` and returns
//!
//! ```text
//! b[c, y, x] = max_δ  m[c, sy·y + δy, sx·x + δx] − Σ_n a[c][n] · d_n(δx, δy)
//! ```
//!
//! Offsets that land outside the map, or whose penalty table holds `+∞` in any
//! basis, are excluded before any arithmetic. Among equal maxima the offset
//! that comes first in `(δy, δx)` lexicographic order wins.
//!
//! With a zero penalty inside radius `k` and `+∞` outside this is plain
//! max-pooling over a `(2k+1)`-wide centred window; with a window that covers
//! the whole map and a quadratic basis it is the classic DPM part score.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dpm::QuadraticDeformation;
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

/// Offset tables `d_n(δx, δy)` for `n = 0..N`, each `(2R+1)×(2R+1)` and stored
/// row-major with `δy` as the row.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBasis {
    radius: usize,
    tables: Vec<Vec<f64>>,
}

impl PenaltyBasis {
    pub fn new(radius: usize, tables: Vec<Vec<f64>>) -> Result<Self> {
        let side = 2 * radius + 1;
        if tables.is_empty() {
            return Err(param_err!("a penalty basis needs at least one table"));
        }
        for (n, t) in tables.iter().enumerate() {
            if t.len() != side * side {
                return Err(dim_err!("table {n} has {} entries, expected {}", t.len(), side * side));
            }
            if t.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
                return Err(param_err!("table {n} holds NaN or -inf"));
            }
        }
        Ok(Self { radius, tables })
    }

    /// `n` all-zero tables.
    pub fn zeros(radius: usize, n: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            radius,
            tables: vec![vec![0.0; side * side]; n],
        }
    }

    /// Builds a basis by evaluating `f(n, δx, δy)` on every offset.
    pub fn from_fn(radius: usize, n: usize, f: impl Fn(usize, isize, isize) -> f64) -> Result<Self> {
        let r = radius as isize;
        let tables = (0..n)
            .map(|k| {
                (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| f(k, dx, dy))
                    .collect()
            })
            .collect();
        Self::new(radius, tables)
    }

    /// Four one-sided displacement costs: leftward, rightward, upward and
    /// downward distance. Each is a directional map in its own right, and the
    /// learned coefficients weight them independently.
    pub fn axis_directions(radius: usize) -> Self {
        Self::from_fn(radius, 4, |n, dx, dy| {
            let v = match n {
                0 => -dx,
                1 => dx,
                2 => -dy,
                _ => dy,
            };
            v.max(0) as f64
        })
        .expect("finite tables")
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn count(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, n: usize) -> &[f64] {
        &self.tables[n]
    }

    pub fn get(&self, n: usize, dx: isize, dy: isize) -> f64 {
        self.tables[n][self.index(dx, dy)]
    }

    #[inline]
    fn index(&self, dx: isize, dy: isize) -> usize {
        let r = self.radius as isize;
        ((dy + r) * (2 * r + 1) + dx + r) as usize
    }

    /// Adds `delta` to every finite entry of table `n`.
    pub fn shifted(&self, n: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.tables[n].iter_mut().filter(|v| v.is_finite()).for_each(|v| *v += delta);
        out
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }
}

/// A single directional penalty map (odd, square, row = δy) as an `N = 1` basis.
pub fn make_directional_basis(penalty_map: &[Vec<f64>]) -> Result<PenaltyBasis> {
    let side = penalty_map.len();
    if side.is_multiple_of(2) || penalty_map.iter().any(|row| row.len() != side) {
        return Err(param_err!("penalty map must be odd-sized and square"));
    }
    PenaltyBasis::new(side / 2, vec![penalty_map.concat()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefPoolConfig {
    pub sx: usize,
    pub sy: usize,
    bases: Vec<PenaltyBasis>,
    channels: usize,
    /// `channels × N`, row-major.
    coeffs: Vec<f64>,
    learnable: bool,
}

impl DefPoolConfig {
    /// All channels share `basis` but own their coefficients.
    pub fn shared(sx: usize, sy: usize, basis: PenaltyBasis, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(sx, sy, vec![basis], coeffs, true)
    }

    pub fn per_channel(sx: usize, sy: usize, bases: Vec<PenaltyBasis>, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        if bases.len() != coeffs.len() {
            return Err(dim_err!("{} bases for {} channels", bases.len(), coeffs.len()));
        }
        Self::build(sx, sy, bases, coeffs, true)
    }

    fn build(sx: usize, sy: usize, bases: Vec<PenaltyBasis>, coeffs: Vec<Vec<f64>>, learnable: bool) -> Result<Self> {
        if sx < 1 || sy < 1 {
            return Err(param_err!("steps must be >= 1, got sx={sx} sy={sy}"));
        }
        if coeffs.is_empty() {
            return Err(param_err!("at least one channel required"));
        }
        let (radius, n) = (bases[0].radius(), bases[0].count());
        if bases.iter().any(|b| b.radius() != radius || b.count() != n) {
            return Err(param_err!("all bases must share radius and basis count"));
        }
        if let Some(c) = coeffs.iter().position(|a| a.len() != n) {
            return Err(dim_err!("channel {c} has {} coefficients, basis has {n}", coeffs[c].len()));
        }
        Ok(Self {
            sx,
            sy,
            bases,
            channels: coeffs.len(),
            coeffs: coeffs.concat(),
            learnable,
        })
    }

    pub fn with_stride(mut self, sx: usize, sy: usize) -> Result<Self> {
        if sx < 1 || sy < 1 {
            return Err(param_err!("steps must be >= 1"));
        }
        self.sx = sx;
        self.sy = sy;
        Ok(self)
    }

    /// Marks the coefficients as fixed constants; training leaves them alone.
    pub fn frozen(mut self) -> Self {
        self.learnable = false;
        self
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn radius(&self) -> usize {
        self.bases[0].radius()
    }

    pub fn basis_count(&self) -> usize {
        self.bases[0].count()
    }

    pub fn shares_basis(&self) -> bool {
        self.bases.len() == 1
    }

    pub fn basis(&self, c: usize) -> &PenaltyBasis {
        if self.shares_basis() {
            &self.bases[0]
        } else {
            &self.bases[c]
        }
    }

    pub fn bases(&self) -> &[PenaltyBasis] {
        &self.bases
    }

    /// Coefficients `a[c][..]` of channel `c`.
    pub fn coeffs(&self, c: usize) -> &[f64] {
        let n = self.basis_count();
        &self.coeffs[c * n..(c + 1) * n]
    }

    pub fn coeff_rows(&self) -> Vec<Vec<f64>> {
        self.coeffs.chunks(self.basis_count()).map(<[f64]>::to_vec).collect()
    }

    /// All coefficients, channel-major.
    pub fn coeffs_flat(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_flat_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.sy, w / self.sx)
    }

    /// Total penalty per offset for channel `c`; `None` marks an excluded offset.
    pub fn penalty_table(&self, c: usize) -> Vec<Option<f64>> {
        let basis = self.basis(c);
        let a = self.coeffs(c);
        (0..basis.side() * basis.side())
            .map(|i| {
                let mut total = 0.0;
                for (n, &an) in a.iter().enumerate() {
                    let d = basis.tables[n][i];
                    if d == f64::INFINITY {
                        return None;
                    }
                    total += an * d;
                }
                Some(total)
            })
            .collect()
    }
}

/// `make_maxpool_basis(k)`: zero cost for `|δx|, |δy| ≤ k`, `+∞` beyond, one
/// fixed coefficient of 1. Stride defaults to 1; set it with
/// [`DefPoolConfig::with_stride`].
pub fn make_maxpool_basis(k: usize, channels: usize) -> DefPoolConfig {
    let radius = k + 1;
    let basis = PenaltyBasis::from_fn(radius, 1, |_, dx, dy| {
        if dx.unsigned_abs() <= k && dy.unsigned_abs() <= k {
            0.0
        } else {
            f64::INFINITY
        }
    })
    .expect("valid basis");
    DefPoolConfig::build(1, 1, vec![basis], vec![vec![1.0]; channels], false).expect("valid config")
}

/// One output per channel whose window covers the whole `h×w` map, anchored at
/// the origin. Zero penalties, so the output is the channel max.
pub fn make_global_basis(h: usize, w: usize, channels: usize) -> Result<DefPoolConfig> {
    make_global_with(h, w, PenaltyBasis::zeros(h.max(w), 1), vec![vec![1.0]; channels])
}

/// A whole-map window (anchor at the origin) with a caller-supplied basis.
pub fn make_global_with(h: usize, w: usize, basis: PenaltyBasis, coeffs: Vec<Vec<f64>>) -> Result<DefPoolConfig> {
    if h < 1 || w < 1 {
        return Err(param_err!("map must be at least 1x1"));
    }
    if basis.radius() < h.max(w) - 1 {
        return Err(param_err!("radius {} cannot cover a {h}x{w} map", basis.radius()));
    }
    DefPoolConfig::shared(w, h, basis, coeffs)
}

/// Directional penalties with the coefficient pinned to 1.
pub fn make_directional_config(basis: PenaltyBasis, channels: usize, sx: usize, sy: usize) -> Result<DefPoolConfig> {
    if basis.count() != 1 {
        return Err(param_err!("a directional map is a single table"));
    }
    DefPoolConfig::build(sx, sy, vec![basis], vec![vec![1.0]; channels], false)
}

/// Quadratic part deformation on an `h×w` map as a global def-pooling config.
///
/// The window is anchored at the origin, so an offset `(δx, δy)` is the absolute
/// position `(row δy, col δx)`. The four tables are `(row−b1)²`, `(col−b2)²`,
/// `row−b1` and `col−b2`, weighted by `a1..a4`. The position-independent
/// constant `a5` is not part of the basis; subtract [`QuadraticDeformation::a5`]
/// from the pooled output to get the DPM score.
pub fn make_quadratic_basis(q: &QuadraticDeformation, h: usize, w: usize) -> Result<DefPoolConfig> {
    if q.b1 >= h || q.b2 >= w {
        return Err(param_err!("anchor ({}, {}) outside {h}x{w} map", q.b1, q.b2));
    }
    let (b1, b2) = (q.b1 as f64, q.b2 as f64);
    let basis = PenaltyBasis::from_fn(h.max(w), 4, |n, dx, dy| {
        let (row, col) = (dy as f64, dx as f64);
        match n {
            0 => (row - b1).powi(2),
            1 => (col - b2).powi(2),
            2 => row - b1,
            _ => col - b2,
        }
    })?;
    make_global_with(h, w, basis, vec![vec![q.a1, q.a2, q.a3, q.a4]])
}

/// Winning offset and source position for every output element, in output
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxRecord {
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    /// `(δx, δy)` per output element.
    pub offsets: Vec<(isize, isize)>,
    /// Flat index into the input tensor per output element.
    pub sources: Vec<usize>,
}

impl ArgmaxRecord {
    /// `(channel, row, col)` of the source for output element `idx`.
    pub fn source_position(&self, idx: usize) -> (usize, usize, usize) {
        let [_, h, w] = self.input_shape;
        let s = self.sources[idx];
        (s / (h * w), (s / w) % h, s % w)
    }
}

pub fn defpool_forward(m: &Tensor, cfg: &DefPoolConfig) -> Result<(Tensor, ArgmaxRecord)> {
    let (c_n, h, w) = m.dims3()?;
    if c_n != cfg.channels() {
        return Err(dim_err!("map has {c_n} channels, config has {}", cfg.channels()));
    }
    let (oh, ow) = cfg.output_dims(h, w);
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!(
            "steps sx={} sy={} leave no anchor inside a {h}x{w} map",
            cfg.sx, cfg.sy
        )));
    }
    let r = cfg.radius() as isize;
    let side = cfg.basis(0).side();
    let x = m.data();
    let mut out = Vec::with_capacity(c_n * oh * ow);
    let mut offsets = Vec::with_capacity(out.capacity());
    let mut sources = Vec::with_capacity(out.capacity());
    for c in 0..c_n {
        let penalty = cfg.penalty_table(c);
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let ay = (oy * cfg.sy) as isize;
            for ox in 0..ow {
                let ax = (ox * cfg.sx) as isize;
                let mut best: Option<(f64, isize, isize, usize)> = None;
                for dy in -r..=r {
                    let row = ay + dy;
                    if row < 0 || row >= h as isize {
                        continue;
                    }
                    let prow = ((dy + r) as usize) * side;
                    for dx in -r..=r {
                        let col = ax + dx;
                        if col < 0 || col >= w as isize {
                            continue;
                        }
                        let Some(p) = penalty[prow + (dx + r) as usize] else {
                            continue;
                        };
                        let src = row as usize * w + col as usize;
                        let v = plane[src] - p;
                        if best.is_none_or(|(b, ..)| v > b) {
                            best = Some((v, dx, dy, src));
                        }
                    }
                }
                let (v, dx, dy, src) = best.ok_or(Error::DegeneratePenalty {
                    channel: c,
                    x: ox,
                    y: oy,
                })?;
                out.push(v);
                offsets.push((dx, dy));
                sources.push(c * h * w + src);
            }
        }
    }
    let record = ArgmaxRecord {
        input_shape: [c_n, h, w],
        output_shape: [c_n, oh, ow],
        offsets,
        sources,
    };
    Ok((Tensor::new(vec![c_n, oh, ow], out)?, record))
}

/// Gradients of the pooled output: `∂b/∂a[c][n] = −d_n(δ*)` at the winning
/// offset, and the output gradient routed to the winning input position.
pub fn defpool_backward(
    grad_out: &Tensor,
    rec: &ArgmaxRecord,
    cfg: &DefPoolConfig,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    if grad_out.shape() != rec.output_shape {
        return Err(dim_err!(
            "grad_out {:?} does not match recorded output {:?}",
            grad_out.shape(),
            rec.output_shape
        ));
    }
    let [c_n, oh, ow] = rec.output_shape;
    if c_n != cfg.channels() {
        return Err(dim_err!("record has {c_n} channels, config has {}", cfg.channels()));
    }
    let mut grad_in = Tensor::zeros(&rec.input_shape);
    let gi = grad_in.data_mut();
    let mut grad_a = vec![vec![0.0; cfg.basis_count()]; c_n];
    let per_channel = oh * ow;
    for (idx, &g) in grad_out.data().iter().enumerate() {
        let c = idx / per_channel;
        gi[rec.sources[idx]] += g;
        if g == 0.0 {
            continue;
        }
        let (dx, dy) = rec.offsets[idx];
        let basis = cfg.basis(c);
        for (n, ga) in grad_a[c].iter_mut().enumerate() {
            *ga -= g * basis.get(n, dx, dy);
        }
    }
    Ok((grad_in, grad_a))
}

/// A single penalty entry in the JSON config: a number, or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64);

impl Serialize for Entry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str(INF_SENTINEL)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Entry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Entry(v)),
            Raw::Str(s) if s == INF_SENTINEL => Ok(Entry(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown penalty sentinel {s:?}"))),
        }
    }
}

pub const INF_SENTINEL: &str = "inf";

type JsonTable = Vec<Vec<Entry>>;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonTables {
    Shared(Vec<JsonTable>),
    PerChannel(Vec<Vec<JsonTable>>),
}

#[derive(Serialize, Deserialize)]
struct JsonConfig {
    #[serde(rename = "R")]
    radius: usize,
    sx: usize,
    sy: usize,
    #[serde(rename = "N")]
    basis_count: usize,
    shared_basis: bool,
    d_tables: JsonTables,
    coeffs: Vec<Vec<f64>>,
    #[serde(default = "default_true")]
    learnable: bool,
}

fn default_true() -> bool {
    true
}

fn table_to_json(b: &PenaltyBasis) -> Vec<JsonTable> {
    let side = b.side();
    b.tables
        .iter()
        .map(|t| t.chunks(side).map(|row| row.iter().map(|&v| Entry(v)).collect()).collect())
        .collect()
}

fn table_from_json(radius: usize, tables: Vec<JsonTable>) -> Result<PenaltyBasis> {
    let side = 2 * radius + 1;
    let tables = tables
        .into_iter()
        .map(|t| {
            if t.len() != side || t.iter().any(|row| row.len() != side) {
                return Err(dim_err!("d table must be {side}x{side}"));
            }
            Ok(t.into_iter().flatten().map(|e| e.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    PenaltyBasis::new(radius, tables)
}

impl DefPoolConfig {
    pub fn to_json(&self) -> Result<String> {
        let d_tables = if self.shares_basis() {
            JsonTables::Shared(table_to_json(&self.bases[0]))
        } else {
            JsonTables::PerChannel(self.bases.iter().map(table_to_json).collect())
        };
        let doc = JsonConfig {
            radius: self.radius(),
            sx: self.sx,
            sy: self.sy,
            basis_count: self.basis_count(),
            shared_basis: self.shares_basis(),
            d_tables,
            coeffs: self.coeff_rows(),
            learnable: self.learnable,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: JsonConfig = serde_json::from_str(s)?;
        let bases = match (doc.shared_basis, doc.d_tables) {
            (true, JsonTables::Shared(t)) => vec![table_from_json(doc.radius, t)?],
            (false, JsonTables::PerChannel(ts)) => ts
                .into_iter()
                .map(|t| table_from_json(doc.radius, t))
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(Error::Format("d_tables nesting disagrees with shared_basis".into())),
        };
        if bases.iter().any(|b| b.count() != doc.basis_count) {
            return Err(Error::Format(format!("expected N={} tables per basis", doc.basis_count)));
        }
        if !doc.shared_basis && bases.len() != doc.coeffs.len() {
            return Err(dim_err!("{} bases for {} channels", bases.len(), doc.coeffs.len()));
        }
        Self::build(doc.sx, doc.sy, bases, doc.coeffs, doc.learnable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_pool_centered;

    fn ramp5() -> Tensor {
        Tensor::from_fn(&[1, 5, 5], |k| ((k / 5) + (k % 5)) as f64)
    }

    #[test]
    fn zero_radius_is_penalised_subsample() {
        let m = ramp5();
        let basis = PenaltyBasis::new(0, vec![vec![0.25], vec![2.0]]).unwrap();
        let cfg = DefPoolConfig::shared(2, 2, basis, vec![vec![2.0, -1.0]]).unwrap();
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.at3(0, y, x), m.at3(0, 2 * y, 2 * x) - (2.0 * 0.25 + -1.0 * 2.0));
            }
        }
        assert!(rec.offsets.iter().all(|&o| o == (0, 0)));
    }

    #[test]
    fn ramp_with_l1_penalty() {
        // m = i + j with cost |δx| + |δy|: moving down/right gains exactly what it costs,
        // so the first offset in scan order reaching the max wins.
        let m = ramp5();
        let basis = PenaltyBasis::from_fn(1, 1, |_, dx, dy| (dx.abs() + dy.abs()) as f64).unwrap();
        let cfg = DefPoolConfig::shared(2, 2, basis, vec![vec![1.0]]).unwrap();
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.at3(0, y, x), (2 * y + 2 * x) as f64);
            }
        }
        assert_eq!(rec.offsets[0], (0, 0));
    }

    #[test]
    fn maxpool_basis_matches_centered_pool() {
        let m = Tensor::from_fn(&[2, 7, 6], |k| ((k * 37) % 11) as f64 - 3.0);
        for k in 0..3 {
            for s in 1..4 {
                let cfg = make_maxpool_basis(k, 2).with_stride(s, s).unwrap();
                let (a, _) = defpool_forward(&m, &cfg).unwrap();
                let (b, _) = max_pool_centered(&m, k, s).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn maxpool_basis_zero_radius_is_subsample() {
        let m = Tensor::from_fn(&[1, 4, 4], |k| k as f64);
        let cfg = make_maxpool_basis(0, 1).with_stride(2, 2).unwrap();
        let (out, _) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn global_basis_and_pinned_anchor() {
        let m = Tensor::from_fn(&[2, 4, 3], |k| ((k * 7) % 5) as f64);
        let cfg = make_global_basis(4, 3, 2).unwrap();
        let (out, _) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1]);
        assert_eq!(out.data()[0], m.channel(0).unwrap().max_value());
        assert_eq!(out.data()[1], m.channel(1).unwrap().max_value());

        let pinned = PenaltyBasis::from_fn(4, 1, |_, dx, dy| if dx == 0 && dy == 0 { 0.0 } else { f64::INFINITY }).unwrap();
        let cfg = make_global_with(4, 3, pinned, vec![vec![1.0]; 2]).unwrap();
        let (out, _) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.data(), &[m.at3(0, 0, 0), m.at3(1, 0, 0)]);
    }

    #[test]
    fn directional_costs() {
        // Leftward moves cost 1, rightward moves cost 2.
        let map: Vec<Vec<f64>> = (0..3)
            .map(|_| vec![1.0, 0.0, 2.0])
            .collect();
        let basis = make_directional_basis(&map).unwrap();
        let cfg = make_directional_config(basis, 1, 1, 1).unwrap();
        assert!(!cfg.is_learnable());
        // Peaks of 5 on both sides of the centre anchor.
        let m = Tensor::new(vec![1, 1, 3], vec![5.0, 0.0, 5.0]).unwrap();
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.at3(0, 0, 1), 4.0);
        assert_eq!(rec.offsets[1], (-1, 0));
        let m = Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 5.0]).unwrap();
        let (out, _) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.at3(0, 0, 1), 3.0);
    }

    #[test]
    fn directional_zero_map_is_window_max() {
        let basis = make_directional_basis(&vec![vec![0.0; 3]; 3]).unwrap();
        let cfg = make_directional_config(basis, 1, 1, 1).unwrap();
        let m = Tensor::from_fn(&[1, 4, 5], |k| ((k * 13) % 7) as f64);
        assert_eq!(defpool_forward(&m, &cfg).unwrap().0, max_pool_centered(&m, 1, 1).unwrap().0);
    }

    #[test]
    fn directional_shift_by_one_column() {
        let mut map = vec![vec![f64::INFINITY; 3]; 3];
        map[1][2] = 0.0; // δx = +1, δy = 0
        let cfg = make_directional_config(make_directional_basis(&map).unwrap(), 1, 1, 1).unwrap();
        // At stride 1 the last column has no right neighbour.
        let m = Tensor::from_fn(&[1, 3, 4], |k| k as f64);
        assert!(matches!(defpool_forward(&m, &cfg), Err(Error::DegeneratePenalty { x: 3, .. })));
        // Anchors 0, 2, 4 all have a right neighbour in a 6-wide map.
        let wide = Tensor::from_fn(&[1, 3, 6], |k| (k * k % 17) as f64);
        let (out, _) = defpool_forward(&wide, &cfg.with_stride(2, 1).unwrap()).unwrap();
        for i in 0..3 {
            for x in 0..3 {
                assert_eq!(out.at3(0, i, x), wide.at3(0, i, 2 * x + 1));
            }
        }
    }

    #[test]
    fn even_directional_map_rejected() {
        assert!(matches!(make_directional_basis(&vec![vec![0.0; 2]; 2]), Err(Error::Parameter(_))));
        assert!(matches!(make_directional_basis(&[vec![0.0; 3], vec![0.0; 2], vec![0.0; 3]]), Err(Error::Parameter(_))));
    }

    #[test]
    fn config_errors() {
        let basis = PenaltyBasis::zeros(1, 2);
        assert!(matches!(DefPoolConfig::shared(0, 1, basis.clone(), vec![vec![0.0; 2]]), Err(Error::Parameter(_))));
        assert!(matches!(DefPoolConfig::shared(1, 1, basis.clone(), vec![vec![0.0; 3]]), Err(Error::Dimension(_))));
        let cfg = DefPoolConfig::shared(5, 1, basis, vec![vec![0.0; 2]]).unwrap();
        assert!(matches!(defpool_forward(&Tensor::zeros(&[1, 3, 3]), &cfg), Err(Error::Config(_))));
        assert!(matches!(defpool_forward(&Tensor::zeros(&[2, 6, 6]), &cfg), Err(Error::Dimension(_))));
        assert!(PenaltyBasis::new(1, vec![vec![f64::NAN; 9]]).is_err());
    }

    #[test]
    fn all_offsets_forbidden_is_degenerate() {
        let basis = PenaltyBasis::new(0, vec![vec![f64::INFINITY]]).unwrap();
        let cfg = DefPoolConfig::shared(1, 1, basis, vec![vec![1.0]]).unwrap();
        assert!(matches!(
            defpool_forward(&Tensor::zeros(&[1, 2, 2]), &cfg),
            Err(Error::DegeneratePenalty { channel: 0, x: 0, y: 0 })
        ));
    }

    #[test]
    fn backward_zero_grad() {
        let m = ramp5();
        let cfg = DefPoolConfig::shared(2, 2, PenaltyBasis::axis_directions(1), vec![vec![0.3, 0.1, 0.2, 0.4]]).unwrap();
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        let (gi, ga) = defpool_backward(&Tensor::zeros(out.shape()), &rec, &cfg).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(ga.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_output_coefficient_grad() {
        // One output, winning offset carries d = 0.7.
        let basis = PenaltyBasis::new(0, vec![vec![0.7]]).unwrap();
        let cfg = DefPoolConfig::shared(1, 1, basis, vec![vec![1.0]]).unwrap();
        let m = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        let (gi, ga) = defpool_backward(&Tensor::filled(out.shape(), 1.0), &rec, &cfg).unwrap();
        assert_eq!(ga, vec![vec![-0.7]]);
        assert_eq!(gi.data(), &[1.0]);
    }

    #[test]
    fn backward_accumulates_shared_sources() {
        let m = Tensor::new(vec![1, 1, 3], vec![0.0, 9.0, 0.0]).unwrap();
        let cfg = make_maxpool_basis(1, 1);
        let (out, rec) = defpool_forward(&m, &cfg).unwrap();
        assert_eq!(out.data(), &[9.0, 9.0, 9.0]);
        let (gi, _) = defpool_backward(&Tensor::filled(out.shape(), 1.0), &rec, &cfg).unwrap();
        assert_eq!(gi.data(), &[0.0, 3.0, 0.0]);
        assert!(defpool_backward(&Tensor::zeros(&[1, 1, 2]), &rec, &cfg).is_err());
    }

    #[test]
    fn json_roundtrip_preserves_infinity() {
        let cfg = make_maxpool_basis(1, 3).with_stride(2, 3).unwrap();
        let s = cfg.to_json().unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(DefPoolConfig::from_json(&s).unwrap(), cfg);

        let per = DefPoolConfig::per_channel(
            1,
            2,
            vec![PenaltyBasis::axis_directions(1), PenaltyBasis::zeros(1, 4).shifted(0, 1.0)],
            vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 0.5, 2.0]],
        )
        .unwrap();
        let back = DefPoolConfig::from_json(&per.to_json().unwrap()).unwrap();
        assert_eq!(back, per);
        assert!(DefPoolConfig::from_json(&s.replace("\"inf\"", "\"nope\"")).is_err());
    }
}
