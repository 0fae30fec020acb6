//! Latent-space geometry: curve lengths, geodesic optimization, grid
//! distance maps, metric rasters and interpolation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;

use autodiff::{linalg, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_pgm_grid, write_pgm_grid};
use crate::error::{Error, Result};
use crate::metric::{FieldVars, MetricField};
use crate::nn::{glorot, Linear};
use crate::rng::{self, tag};
use crate::train::{Adam, ModelBundle};

/// Floor added under the square root of the speed so the gradient stays
/// finite on constant curves.
const SPEED_FLOOR: f64 = 1e-30;

/// `(1/n) Σ_i √(γ′ᵢᵀ G(mᵢ) γ′ᵢ)` for curve samples `(n+1, d)` on `t ∈ [0,1]`,
/// with forward-difference velocities and midpoints `mᵢ`.
pub fn curve_length(field: &FieldVars, points: &Var) -> Result<Var> {
    let s = points.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Config("a curve needs at least two samples".into()));
    }
    let n = s[0] - 1;
    let head = points.slice(0, 0, n)?;
    let tail = points.slice(0, 1, n)?;
    let velocity = tail.sub(&head)?.scale(n as f64);
    let mid = tail.add(&head)?.scale(0.5);
    let l = field.inverse_metric(&mid)?.cholesky()?;
    let w = l.trisolve_vec(&velocity, false)?;
    Ok(w.square().sum_axis(1, false)?.offset(SPEED_FLOOR).sqrt().mean()?)
}

/// Value-only `curve_length` for a frozen field.
pub fn curve_length_value(field: &MetricField, points: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let f = field.bind(&tape);
    curve_length(&f, &tape.constant(points.clone()))?.item().map_err(Error::from)
}

/// `γ(t) = (1−t) z1 + t z2 + t(1−t) MLP(t)` with a `1 → 100 → 100 → d`
/// tanh network.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveNet {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub layers: [Linear<Tensor>; 3],
}

pub const CURVE_HIDDEN: usize = 100;

impl CurveNet {
    /// Random hidden layers and a zero output layer, so the initial curve
    /// is the chord.
    pub fn new(z1: &[f64], z2: &[f64], seed: u64) -> Result<Self> {
        let d = z1.len();
        if d == 0 || z2.len() != d {
            return Err(Error::Config("curve endpoints must share a positive dimension".into()));
        }
        let mut r = rng::stream(seed, tag::GEODESIC, 0);
        let l1 = glorot(&mut r, 1, CURVE_HIDDEN);
        let l2 = glorot(&mut r, CURVE_HIDDEN, CURVE_HIDDEN);
        let l3 = Linear {
            w: Tensor::zeros([CURVE_HIDDEN, d])?,
            b: Tensor::zeros([d])?,
        };
        Ok(Self {
            z1: z1.to_vec(),
            z2: z2.to_vec(),
            layers: [l1, l2, l3],
        })
    }

    pub fn dim(&self) -> usize {
        self.z1.len()
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    fn with_tensors(&self, t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        let mut next = || Linear {
            w: it.next().expect("six tensors"),
            b: it.next().expect("six tensors"),
        };
        Self {
            z1: self.z1.clone(),
            z2: self.z2.clone(),
            layers: [next(), next(), next()],
        }
    }

    /// Curve samples at `t_i = i/n`, `(n+1, d)`, built from `layers`.
    fn points_var(&self, tape: &Tape, layers: &[Linear<Var>], n: usize) -> Result<Var> {
        let d = self.dim();
        let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let mut base = Vec::with_capacity((n + 1) * d);
        for &t in &ts {
            base.extend((0..d).map(|k| (1.0 - t) * self.z1[k] + t * self.z2[k]));
        }
        let envelope: Vec<f64> = ts.iter().map(|t| t * (1.0 - t)).collect();
        let t = tape.constant(Tensor::new([n + 1, 1], ts)?);
        let h1 = layers[0].forward(&t)?.tanh();
        let h2 = layers[1].forward(&h1)?.tanh();
        let out = layers[2].forward(&h2)?;
        let env = tape.constant(Tensor::new([n + 1, 1], envelope)?);
        Ok(tape.constant(Tensor::new([n + 1, d], base)?).add(&env.mul(&out)?)?)
    }

    /// Curve samples at `t_i = i/n`, `(n+1, d)`.
    pub fn points(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Config("curve granularity must be positive".into()));
        }
        let tape = Tape::new();
        let layers: Vec<Linear<Var>> = self
            .layers
            .iter()
            .map(|l| Linear {
                w: tape.constant(l.w.clone()),
                b: tape.constant(l.b.clone()),
            })
            .collect();
        Ok((*self.points_var(&tape, &layers, n)?.value()).clone())
    }

    /// CSV with header `t,z0,z1,...`.
    pub fn csv(&self, n: usize) -> Result<String> {
        let p = self.points(n)?;
        let d = self.dim();
        let mut s = String::from("t");
        for k in 0..d {
            s.push_str(&format!(",z{k}"));
        }
        s.push('\n');
        for i in 0..=n {
            s.push_str(&format!("{}", i as f64 / n as f64));
            for v in p.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicConfig {
    /// Curve granularity.
    pub n: usize,
    pub iters: usize,
    pub learning_rate: f64,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            n: 100,
            iters: 2000,
            learning_rate: 1e-3,
        }
    }
}

/// Minimizes `curve_length` over the curve network with Adam and returns
/// the shortest iterate with its length.
pub fn optimize_geodesic(
    field: &MetricField,
    z1: &[f64],
    z2: &[f64],
    cfg: &GeodesicConfig,
    seed: u64,
) -> Result<(CurveNet, f64)> {
    if cfg.n < 16 {
        return Err(Error::Config(format!("geodesic granularity {} is below 16", cfg.n)));
    }
    if z1.len() != field.dim() {
        return Err(Error::Config("endpoint dimension differs from the metric".into()));
    }
    let mut net = CurveNet::new(z1, z2, seed)?;
    if z1 == z2 {
        return Ok((net, 0.0));
    }
    let mut params = net.tensors();
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for it in 0..=cfg.iters {
        let tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let layers: Vec<Linear<Var>> = leaves
            .chunks(2)
            .map(|c| Linear {
                w: c[0].clone(),
                b: c[1].clone(),
            })
            .collect();
        let f = field.bind(&tape);
        let length = curve_length(&f, &net.points_var(&tape, &layers, cfg.n)?)?;
        let value = length.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("geodesic length at iteration {it}")));
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        if it == cfg.iters {
            break;
        }
        let g = tape.backward(&length)?;
        let grads: Vec<Tensor> = leaves.iter().map(|l| g.wrt(l)).collect();
        adam.step(&mut params, &grads);
    }
    let (length, p) = best.expect("at least one evaluation");
    net = net.with_tensors(p);
    Ok((net, length))
}

/// A regular 2-D grid of latent nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Nodes per axis.
    pub res: usize,
}

impl LatentGrid {
    pub fn new(min: [f64; 2], max: [f64; 2], res: usize) -> Result<Self> {
        if res < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        if !(max[0] > min[0] && max[1] > min[1]) {
            return Err(Error::Config("grid box is degenerate".into()));
        }
        Ok(Self { min, max, res })
    }

    /// Bounding box of `points` `(N, 2)` widened by 10% of its extent on
    /// each side.
    pub fn around(points: &[f64], res: usize) -> Result<Self> {
        if points.is_empty() || points.len() % 2 != 0 {
            return Err(Error::Unsupported("latent grids need 2-D points".into()));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points.chunks(2) {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..2 {
            let span = (hi[k] - lo[k]).max(1e-6);
            lo[k] -= 0.1 * span;
            hi[k] += 0.1 * span;
        }
        Self::new(lo, hi, res)
    }

    pub fn cell(&self) -> [f64; 2] {
        let r = (self.res - 1) as f64;
        [(self.max[0] - self.min[0]) / r, (self.max[1] - self.min[1]) / r]
    }

    pub fn num_nodes(&self) -> usize {
        self.res * self.res
    }

    /// Node `(i, j)` has index `j * res + i`, `i` along the first axis.
    pub fn node(&self, index: usize) -> [f64; 2] {
        let c = self.cell();
        let (i, j) = (index % self.res, index / self.res);
        [self.min[0] + i as f64 * c[0], self.min[1] + j as f64 * c[1]]
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == 2 && (0..2).all(|k| z[k] >= self.min[k] && z[k] <= self.max[k])
    }

    pub fn nearest(&self, z: &[f64]) -> Result<usize> {
        if !self.contains(z) {
            return Err(Error::Config(format!("point {z:?} lies outside the grid box")));
        }
        let c = self.cell();
        let i = (((z[0] - self.min[0]) / c[0]).round() as usize).min(self.res - 1);
        let j = (((z[1] - self.min[1]) / c[1]).round() as usize).min(self.res - 1);
        Ok(j * self.res + i)
    }

    /// `G⁻¹` at every node, row-major `2 × 2` blocks.
    pub fn inverse_metrics(&self, field: &MetricField) -> Result<Vec<[f64; 4]>> {
        if field.dim() != 2 {
            return Err(Error::Unsupported(format!("rasters need d = 2, field has d = {}", field.dim())));
        }
        Ok((0..self.num_nodes())
            .into_par_iter()
            .map(|k| {
                let g = field.inverse_metric_at(&self.node(k));
                [g[0], g[1], g[2], g[3]]
            })
            .collect())
    }
}

/// Offsets in cells of the four undirected edge types.
const EDGE_TYPES: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// A grid with precomputed half edge weights `½√(Δᵀ G(u) Δ)` per node and
/// edge type.
#[derive(Clone, Debug)]
pub struct GridMetric {
    pub grid: LatentGrid,
    half: Vec<[f64; 4]>,
}

fn inverse_2x2(g: &[f64; 4]) -> [f64; 4] {
    let det = g[0] * g[3] - g[1] * g[2];
    [g[3] / det, -g[1] / det, -g[2] / det, g[0] / det]
}

impl GridMetric {
    pub fn new(field: &MetricField, grid: LatentGrid) -> Result<Self> {
        let ginv = grid.inverse_metrics(field)?;
        let c = grid.cell();
        let half = ginv
            .par_iter()
            .map(|gi| {
                let g = inverse_2x2(gi);
                EDGE_TYPES.map(|(a, b)| {
                    let (x, y) = (a as f64 * c[0], b as f64 * c[1]);
                    0.5 * (g[0] * x * x + (g[1] + g[2]) * x * y + g[3] * y * y).sqrt()
                })
            })
            .collect();
        Ok(Self { grid, half })
    }

    fn neighbors(&self, k: usize, mut visit: impl FnMut(usize, f64)) {
        let r = self.grid.res as isize;
        let (i, j) = ((k % self.grid.res) as isize, (k / self.grid.res) as isize);
        for (t, &(a, b)) in EDGE_TYPES.iter().enumerate() {
            for s in [1, -1] {
                let (ni, nj) = (i + s * a, j + s * b);
                if ni >= 0 && nj >= 0 && ni < r && nj < r {
                    let m = (nj * r + ni) as usize;
                    visit(m, self.half[k][t] + self.half[m][t]);
                }
            }
        }
    }

    /// Shortest-path distances from node `source` to every node.
    pub fn distances_from_node(&self, source: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist = vec![f64::INFINITY; self.grid.num_nodes()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Item(0.0, source));
        while let Some(Item(d, k)) = heap.pop() {
            if d > dist[k] {
                continue;
            }
            self.neighbors(k, |m, w| {
                let nd = d + w;
                if nd < dist[m] {
                    dist[m] = nd;
                    heap.push(Item(nd, m));
                }
            });
        }
        dist
    }
}

/// Values on a [`LatentGrid`], node index `j * nx + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub grid: LatentGrid,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.res + i]
    }

    /// CSV with header `i,j,z0,z1,value`.
    pub fn csv(&self) -> String {
        let mut s = String::from("i,j,z0,z1,value\n");
        for (k, v) in self.values.iter().enumerate() {
            let z = self.grid.node(k);
            s.push_str(&format!("{},{},{},{},{}\n", k % self.grid.res, k / self.grid.res, z[0], z[1], v));
        }
        s
    }

    /// Grey levels scaled to the raster's range, largest `z1` at the top.
    pub fn normalized_image(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let r = self.grid.res;
        let mut img = Vec::with_capacity(r * r);
        for row in (0..r).rev() {
            img.extend(self.values[row * r..(row + 1) * r].iter().map(|v| (v - lo) / span));
        }
        img
    }

    pub fn pgm(&self) -> Result<Vec<u8>> {
        encode_pgm_grid(&self.normalized_image(), self.grid.res, self.grid.res, 1)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm_grid(&self.normalized_image(), self.grid.res, self.grid.res, 1, path)
    }
}

/// Riemannian distance from `source` to every grid node.
pub fn grid_distance_map(metric: &GridMetric, source: &[f64]) -> Result<Raster> {
    let node = metric.grid.nearest(source)?;
    Ok(Raster {
        grid: metric.grid.clone(),
        values: metric.distances_from_node(node),
    })
}

/// `log √det G` at every node.
pub fn volume_element_map(field: &MetricField, grid: &LatentGrid) -> Result<Raster> {
    let values = grid
        .inverse_metrics(field)?
        .iter()
        .map(|g| -0.5 * (g[0] * g[3] - g[1] * g[2]).ln())
        .collect();
    Ok(Raster {
        grid: grid.clone(),
        values,
    })
}

/// `(λ_max − λ_min)/(λ_max + λ_min)` of `G`, from `G⁻¹` `(d, d)`. The ratio
/// is the same for `G` and `G⁻¹`.
pub fn anisotropy(inverse_metric: &[f64], d: usize) -> f64 {
    let (lo, hi) = if d == 2 {
        let g = inverse_metric;
        let mean = 0.5 * (g[0] + g[3]);
        let r = (0.25 * (g[0] - g[3]).powi(2) + g[1] * g[2]).max(0.0).sqrt();
        (mean - r, mean + r)
    } else {
        let ev = linalg::symmetric_eigenvalues(inverse_metric, d);
        (ev[0], ev[d - 1])
    };
    (hi - lo) / (hi + lo)
}

pub fn anisotropy_at(field: &MetricField, z: &[f64]) -> f64 {
    anisotropy(&field.inverse_metric_at(z), field.dim())
}

pub fn anisotropy_map(field: &MetricField, grid: &LatentGrid) -> Result<Raster> {
    let values = grid.inverse_metrics(field)?.iter().map(|g| anisotropy(g, 2)).collect();
    Ok(Raster {
        grid: grid.clone(),
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    Affine,
    Geodesic,
}

impl fmt::Display for InterpolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Affine => "affine",
            Self::Geodesic => "geodesic",
        })
    }
}

impl std::str::FromStr for InterpolationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Self::Affine),
            "geodesic" => Ok(Self::Geodesic),
            _ => Err(Error::Config(format!("unknown interpolation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    /// Latent frames `(F, d)`.
    pub latent: Tensor,
    /// Decoded frames `(F, D)`.
    pub frames: Tensor,
    /// Riemannian length of the latent curve when a field is available.
    pub length: Option<f64>,
}

/// Decodes a latent path between the posterior means of `x1` and `x2`,
/// sampling the curve at `n + 1` points and keeping every `every`-th.
pub fn interpolate(
    bundle: &ModelBundle,
    x1: &[f64],
    x2: &[f64],
    mode: InterpolationMode,
    cfg: &GeodesicConfig,
    every: usize,
    seed: u64,
) -> Result<Interpolation> {
    if every == 0 || cfg.n % every != 0 {
        return Err(Error::Config(format!("frame stride {every} must divide granularity {}", cfg.n)));
    }
    let dd = bundle.spec().data_dim;
    if x1.len() != dd || x2.len() != dd {
        return Err(Error::Data("endpoint images do not match the model".into()));
    }
    let mut both = x1.to_vec();
    both.extend_from_slice(x2);
    let z = bundle.params.encode_means(&Tensor::new([2, dd], both)?)?;
    let (z1, z2) = (z.row(0), z.row(1));
    let (points, length) = match mode {
        InterpolationMode::Affine => {
            let net = CurveNet::new(z1, z2, seed)?;
            let p = net.points(cfg.n)?;
            let length = match &bundle.field {
                Some(f) => Some(curve_length_value(f, &p)?),
                None => None,
            };
            (p, length)
        }
        InterpolationMode::Geodesic => {
            let field = bundle
                .field
                .as_ref()
                .ok_or_else(|| Error::Unsupported("geodesic interpolation needs a frozen metric".into()))?;
            let (net, length) = optimize_geodesic(field, z1, z2, cfg, seed)?;
            (net.points(cfg.n)?, Some(length))
        }
    };
    let d = z1.len();
    let keep: Vec<f64> = (0..=cfg.n)
        .step_by(every)
        .flat_map(|i| points.row(i).to_vec())
        .collect();
    let latent = Tensor::new([keep.len() / d, d], keep)?;
    let frames = bundle.params.decode_values(&latent)?;
    Ok(Interpolation { latent, frames, length })
}
