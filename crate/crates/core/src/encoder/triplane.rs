//! Tri-plane feature field: per-point lift, orthogonal scatter-mean onto the
//! `xy`, `yz` and `zx` planes, a depthwise 3x3 mixing pass, and bilinear
//! queries summed across planes.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::geometry::{Point3, PointSet};
use crate::nn::{ops, Gradients, Init, Linear, ParamId, ParameterStore, Tensor};

/// The three axis-aligned planes, each addressed by a pair of coordinate axes
/// `(u, v)`: the plane's column follows `u`, its row follows `v`.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];
pub const PLANE_NAMES: [&str; 3] = ["xy", "yz", "zx"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Feature channels `D`.
    pub dim: usize,
    /// Plane resolution (`H = W`).
    pub res: usize,
    /// Hidden widths of the per-point lift network.
    pub lift_hidden: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 96, res: 32, lift_hidden: [64, 64] }
    }
}

/// Three `D x H x W` feature planes. Stored cell-major (`[row][col][channel]`)
/// so a bilinear query reads four contiguous channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlaneField {
    pub dim: usize,
    pub res: usize,
    pub planes: [Vec<f32>; 3],
}

impl TriPlaneField {
    pub fn zeros(dim: usize, res: usize) -> Self {
        let n = dim * res * res;
        Self { dim, res, planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.res + col) * self.dim
    }

    pub fn cell(&self, plane: usize, row: usize, col: usize) -> &[f32] {
        let o = self.offset(row, col);
        &self.planes[plane][o..o + self.dim]
    }

    pub fn cell_mut(&mut self, plane: usize, row: usize, col: usize) -> &mut [f32] {
        let o = self.offset(row, col);
        &mut self.planes[plane][o..o + self.dim]
    }

    /// Number of cells holding a non-zero vector in `plane`.
    pub fn occupied_cells(&self, plane: usize) -> usize {
        self.planes[plane].chunks(self.dim).filter(|c| c.iter().any(|&v| v != 0.0)).count()
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().flatten().all(|v| v.is_finite())
    }
}

/// Maps a coordinate in `[-1, 1]` to continuous grid units `[0, res - 1]`.
#[inline]
pub fn to_grid(c: f32, res: usize) -> f32 {
    (c + 1.0) * 0.5 * (res - 1) as f32
}

/// Nearest grid node of a coordinate, clamped to the grid.
#[inline]
pub fn nearest_node(c: f32, res: usize) -> usize {
    (to_grid(c, res).round().max(0.0) as usize).min(res - 1)
}

/// Bilinear corner indices and weights for one plane query. Grid
/// coordinates and weights are formed in binary64: in binary32 the rounding
/// of `(c + 1) / 2 * (res - 1)` alone shifts weights by ~1e-6 at `res = 32`.
#[derive(Debug, Clone, Copy)]
struct Bilinear {
    rows: [usize; 2],
    cols: [usize; 2],
    fr: f64,
    fc: f64,
    clamped: bool,
}

impl Bilinear {
    fn new(u: f32, v: f32, res: usize) -> Self {
        let max = (res - 1) as f64;
        let gu = (u as f64 + 1.0) * 0.5 * max;
        let gv = (v as f64 + 1.0) * 0.5 * max;
        let clamped = !(0.0..=max).contains(&gu) || !(0.0..=max).contains(&gv);
        let gu = gu.clamp(0.0, max);
        let gv = gv.clamp(0.0, max);
        let c0 = (gu.floor() as usize).min(res.saturating_sub(2));
        let r0 = (gv.floor() as usize).min(res.saturating_sub(2));
        Self { rows: [r0, (r0 + 1).min(res - 1)], cols: [c0, (c0 + 1).min(res - 1)], fr: gv - r0 as f64, fc: gu - c0 as f64, clamped }
    }

    fn weights(&self) -> [(usize, usize, f32); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.rows[0], self.cols[0], ((1.0 - fr) * (1.0 - fc)) as f32),
            (self.rows[0], self.cols[1], ((1.0 - fr) * fc) as f32),
            (self.rows[1], self.cols[0], (fr * (1.0 - fc)) as f32),
            (self.rows[1], self.cols[1], (fr * fc) as f32),
        ]
    }
}

/// Per-point features queried from a field.
#[derive(Debug, Clone)]
pub struct PointFeatureMatrix {
    pub features: Tensor,
    /// Queries that fell outside `[-1, 1]` on some plane and were clamped.
    pub clamped_queries: usize,
}

/// `F_n = T_xy(x_n, y_n) + T_yz(y_n, z_n) + T_zx(z_n, x_n)`, each plane read
/// with bilinear interpolation and boundary clamping.
pub fn sample_point_features(field: &TriPlaneField, points: &[Point3]) -> PointFeatureMatrix {
    let d = field.dim;
    let mut out = vec![0.0f32; points.len() * d];
    let mut clamped_queries = 0;
    for (n, p) in points.iter().enumerate() {
        let row = &mut out[n * d..(n + 1) * d];
        let mut clamped = false;
        for (plane, &(ua, va)) in PLANE_AXES.iter().enumerate() {
            let bl = Bilinear::new(p[ua], p[va], field.res);
            clamped |= bl.clamped;
            for (r, c, w) in bl.weights() {
                if w == 0.0 {
                    continue;
                }
                for (o, &t) in row.iter_mut().zip(field.cell(plane, r, c)) {
                    *o += w * t;
                }
            }
        }
        clamped_queries += clamped as usize;
    }
    if clamped_queries > 0 {
        log::debug!("{clamped_queries} tri-plane queries clamped to the grid boundary");
    }
    PointFeatureMatrix { features: Tensor::matrix(points.len(), d, out).unwrap(), clamped_queries }
}

/// Adjoint of [`sample_point_features`]: scatters `d_features` back onto the
/// planes with the same bilinear weights.
pub fn sample_point_features_backward(points: &[Point3], d_features: &Tensor, dim: usize, res: usize) -> TriPlaneField {
    let mut grad = TriPlaneField::zeros(dim, res);
    for (n, p) in points.iter().enumerate() {
        let g = d_features.row(n);
        for (plane, &(ua, va)) in PLANE_AXES.iter().enumerate() {
            let bl = Bilinear::new(p[ua], p[va], res);
            for (r, c, w) in bl.weights() {
                if w == 0.0 {
                    continue;
                }
                for (o, &v) in grad.cell_mut(plane, r, c).iter_mut().zip(g) {
                    *o += w * v;
                }
            }
        }
    }
    grad
}

/// Intermediate values of [`Encoder::build_triplane`] needed for backward.
pub struct TriPlaneCache {
    input: Tensor,
    pre1: Tensor,
    h1: Tensor,
    pre2: Tensor,
    h2: Tensor,
    /// Cell index per (point, plane).
    cells: Vec<[usize; 3]>,
    counts: [Vec<u32>; 3],
    /// Planes after scatter-mean, before mixing.
    pub scattered: TriPlaneField,
}

impl TriPlaneCache {
    /// Cells of `plane` that received at least one point.
    pub fn occupied_cells(&self, plane: usize) -> usize {
        self.counts[plane].iter().filter(|&&c| c > 0).count()
    }

    /// Number of points scattered into a cell.
    pub fn cell_count(&self, plane: usize, row: usize, col: usize) -> u32 {
        let res = (self.counts[plane].len() as f64).sqrt() as usize;
        self.counts[plane][row * res + col]
    }
}

/// Point-consistent part encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub lift: [Linear; 3],
    /// Depthwise 3x3 kernels, one `D x 9` tensor per plane.
    pub mix: [ParamId; 3],
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let [h1, h2] = cfg.lift_hidden;
        let lift = [
            Linear::new(store, "encoder.lift.0", 3, h1, Init::Default, rng)?,
            Linear::new(store, "encoder.lift.1", h1, h2, Init::Default, rng)?,
            Linear::new(store, "encoder.lift.2", h2, cfg.dim, Init::Default, rng)?,
        ];
        let mut mix = Vec::with_capacity(3);
        for name in PLANE_NAMES {
            // Identity kernel: centre tap 1.
            let mut k = Tensor::zeros(&[cfg.dim, 9]);
            for c in 0..cfg.dim {
                k.data_mut()[c * 9 + 4] = 1.0;
            }
            mix.push(store.add(format!("encoder.mix.{name}"), k)?);
        }
        Ok(Self { cfg, lift, mix: [mix[0], mix[1], mix[2]] })
    }

    /// Per-point lift network `3 -> D`.
    fn lift_forward(&self, store: &ParameterStore, input: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let pre1 = self.lift[0].forward(store, input)?;
        let h1 = ops::gelu(&pre1);
        let pre2 = self.lift[1].forward(store, &h1)?;
        let h2 = ops::gelu(&pre2);
        let out = self.lift[2].forward(store, &h2)?;
        Ok((pre1, h1, pre2, h2, out))
    }

    /// Builds the field for a normalised cloud.
    pub fn build_triplane(&self, store: &ParameterStore, cloud: &PointSet) -> Result<(TriPlaneField, TriPlaneCache)> {
        let (d, res) = (self.cfg.dim, self.cfg.res);
        if res < 2 {
            return Err(shape_err("tri-plane resolution must be at least 2"));
        }
        let coords = cloud.coords();
        let input = Tensor::matrix(coords.len(), 3, coords.iter().flatten().copied().collect())?;
        let (pre1, h1, pre2, h2, lifted) = self.lift_forward(store, &input)?;

        let mut scattered = TriPlaneField::zeros(d, res);
        let mut counts = [vec![0u32; res * res], vec![0u32; res * res], vec![0u32; res * res]];
        let mut cells = Vec::with_capacity(coords.len());
        for (n, p) in coords.iter().enumerate() {
            let mut idx = [0usize; 3];
            for (plane, &(ua, va)) in PLANE_AXES.iter().enumerate() {
                let (r, c) = (nearest_node(p[va], res), nearest_node(p[ua], res));
                let cell = r * res + c;
                idx[plane] = cell;
                counts[plane][cell] += 1;
                for (o, &v) in scattered.planes[plane][cell * d..(cell + 1) * d].iter_mut().zip(lifted.row(n)) {
                    *o += v;
                }
            }
            cells.push(idx);
        }
        for plane in 0..3 {
            for (cell, &count) in counts[plane].iter().enumerate() {
                if count > 1 {
                    let inv = 1.0 / count as f32;
                    scattered.planes[plane][cell * d..(cell + 1) * d].iter_mut().for_each(|v| *v *= inv);
                }
            }
        }

        let mut field = TriPlaneField::zeros(d, res);
        for plane in 0..3 {
            let k = store.get(self.mix[plane]).data();
            mix_forward(&scattered.planes[plane], k, &mut field.planes[plane], d, res);
        }
        Ok((field, TriPlaneCache { input, pre1, h1, pre2, h2, cells, counts, scattered }))
    }

    /// Field construction followed by a query at every point of the cloud.
    pub fn features(&self, store: &ParameterStore, cloud: &PointSet) -> Result<Tensor> {
        let (field, _) = self.build_triplane(store, cloud)?;
        Ok(sample_point_features(&field, cloud.coords()).features)
    }

    /// Backpropagates a gradient on the field into the encoder parameters.
    pub fn backward(&self, store: &ParameterStore, cache: &TriPlaneCache, d_field: &TriPlaneField, grads: &mut Gradients) {
        let (d, res) = (self.cfg.dim, self.cfg.res);
        let mut d_scattered = TriPlaneField::zeros(d, res);
        for plane in 0..3 {
            let k = store.get(self.mix[plane]).data();
            let dk = grads.get_mut(self.mix[plane]).data_mut();
            mix_backward(
                &cache.scattered.planes[plane],
                k,
                &d_field.planes[plane],
                &mut d_scattered.planes[plane],
                dk,
                d,
                res,
            );
        }
        let n = cache.cells.len();
        let mut d_lift = Tensor::zeros(&[n, d]);
        for (i, cells) in cache.cells.iter().enumerate() {
            let row = d_lift.row_mut(i);
            for plane in 0..3 {
                let cell = cells[plane];
                let inv = 1.0 / cache.counts[plane][cell] as f32;
                for (o, &g) in row.iter_mut().zip(&d_scattered.planes[plane][cell * d..(cell + 1) * d]) {
                    *o += g * inv;
                }
            }
        }
        let dh2 = self.lift[2].backward(store, &cache.h2, &d_lift, grads);
        let dpre2 = ops::gelu_backward(&cache.pre2, &dh2);
        let dh1 = self.lift[1].backward(store, &cache.h1, &dpre2, grads);
        let dpre1 = ops::gelu_backward(&cache.pre1, &dh1);
        self.lift[0].backward(store, &cache.input, &dpre1, grads);
    }
}

/// Depthwise 3x3 mixing with zero padding. `kernel` is `D x 9`, taps in
/// row-major `(dr, dc)` order.
fn mix_forward(input: &[f32], kernel: &[f32], out: &mut [f32], d: usize, res: usize) {
    for r in 0..res {
        for c in 0..res {
            let o = &mut out[(r * res + c) * d..(r * res + c + 1) * d];
            for tap in 0..9 {
                let (rr, cc) = (r as isize + tap as isize / 3 - 1, c as isize + tap as isize % 3 - 1);
                if rr < 0 || cc < 0 || rr >= res as isize || cc >= res as isize {
                    continue;
                }
                let src = &input[(rr as usize * res + cc as usize) * d..][..d];
                for ch in 0..d {
                    o[ch] += kernel[ch * 9 + tap] * src[ch];
                }
            }
        }
    }
}

fn mix_backward(
    input: &[f32],
    kernel: &[f32],
    d_out: &[f32],
    d_input: &mut [f32],
    d_kernel: &mut [f32],
    d: usize,
    res: usize,
) {
    let mut dk = vec![0.0f64; d * 9];
    for r in 0..res {
        for c in 0..res {
            let g = &d_out[(r * res + c) * d..][..d];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for tap in 0..9 {
                let (rr, cc) = (r as isize + tap as isize / 3 - 1, c as isize + tap as isize % 3 - 1);
                if rr < 0 || cc < 0 || rr >= res as isize || cc >= res as isize {
                    continue;
                }
                let base = (rr as usize * res + cc as usize) * d;
                for ch in 0..d {
                    d_input[base + ch] += kernel[ch * 9 + tap] * g[ch];
                    dk[ch * 9 + tap] += (input[base + ch] * g[ch]) as f64;
                }
            }
        }
    }
    for (o, v) in d_kernel.iter_mut().zip(dk) {
        *o += v as f32;
    }
}
