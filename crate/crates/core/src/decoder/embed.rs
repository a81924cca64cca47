//! Coordinate and scale embeddings and the FiLM layer.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::geometry::Point3;
use crate::nn::ops::LayerNormCache;
use crate::nn::{Gradients, Init, LayerNorm, Linear, ParamId, ParameterStore, Tensor};

/// Lowest and highest angular frequency of the positional encoding.
pub const PE_FREQ_RANGE: (f32, f32) = (1.0, 64.0);
/// Initial range of the learnable scale frequencies.
pub const SCALE_FREQ_RANGE: (f32, f32) = (1.0, 128.0);

fn geometric(k: usize, count: usize, (lo, hi): (f32, f32)) -> f32 {
    if count == 1 {
        lo
    } else {
        lo * (hi / lo).powf(k as f32 / (count - 1) as f32)
    }
}

/// Fixed sinusoidal encoding of coordinates in `[-1, 1]`.
///
/// Each axis gets `D / 3` channels: `D / 6` interleaved `(sin, cos)` pairs at
/// geometric frequencies. Axis blocks are concatenated `x | y | z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    dim: usize,
    freqs: Vec<f32>,
}

impl PositionalEncoding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 6 != 0 {
            return Err(shape_err(format!("positional encoding width {dim} is not a positive multiple of 6")));
        }
        let pairs = dim / 6;
        Ok(Self { dim, freqs: (0..pairs).map(|k| geometric(k, pairs, PE_FREQ_RANGE)).collect() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn freqs(&self) -> &[f32] {
        &self.freqs
    }

    pub fn encode(&self, points: &[Point3]) -> Tensor {
        let per_axis = self.dim / 3;
        let mut out = Tensor::zeros(&[points.len(), self.dim]);
        for (r, p) in points.iter().enumerate() {
            let row = out.row_mut(r);
            for (axis, &c) in p.iter().enumerate() {
                for (k, &f) in self.freqs.iter().enumerate() {
                    let (s, co) = (f * c).sin_cos();
                    row[axis * per_axis + 2 * k] = s;
                    row[axis * per_axis + 2 * k + 1] = co;
                }
            }
        }
        out
    }
}

/// Convenience wrapper: `positional_encoding(points, D)`.
pub fn positional_encoding(points: &[Point3], dim: usize) -> Result<Tensor> {
    Ok(PositionalEncoding::new(dim)?.encode(points))
}

/// Learnable sinusoidal scale embedding `e(s)`, `2M` wide, pairs interleaved
/// as `[sin(w_k s + phi_k), cos(w_k s + phi_k)]`.
#[derive(Debug, Clone)]
pub struct ScaleEmbedding {
    pub omega: ParamId,
    pub phi: ParamId,
    pub pairs: usize,
}

impl ScaleEmbedding {
    pub fn new(store: &mut ParameterStore, name: &str, pairs: usize) -> Result<Self> {
        let omega = (0..pairs).map(|k| geometric(k, pairs, SCALE_FREQ_RANGE)).collect();
        Ok(Self {
            omega: store.add(format!("{name}.omega"), Tensor::new(vec![pairs], omega)?)?,
            phi: store.add_zeros(format!("{name}.phi"), &[pairs])?,
            pairs,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.pairs
    }

    /// `e(s)` as a `1 x 2M` row. Scales outside `[0, 1]` are clamped.
    pub fn embed(&self, store: &ParameterStore, s: f32) -> Tensor {
        let s = clamp_scale(s);
        let (w, phi) = (store.get(self.omega).data(), store.get(self.phi).data());
        let mut e = Vec::with_capacity(2 * self.pairs);
        for k in 0..self.pairs {
            let (sn, cs) = (w[k] * s + phi[k]).sin_cos();
            e.push(sn);
            e.push(cs);
        }
        Tensor::matrix(1, 2 * self.pairs, e).unwrap()
    }

    pub fn backward(&self, store: &ParameterStore, s: f32, de: &Tensor, grads: &mut Gradients) {
        let s = clamp_scale(s);
        let (w, phi) = (store.get(self.omega).data(), store.get(self.phi).data());
        let mut dw = vec![0.0f32; self.pairs];
        let mut dphi = vec![0.0f32; self.pairs];
        for k in 0..self.pairs {
            let (sn, cs) = (w[k] * s + phi[k]).sin_cos();
            let dtheta = de.data()[2 * k] * cs - de.data()[2 * k + 1] * sn;
            dw[k] = dtheta * s;
            dphi[k] = dtheta;
        }
        grads.accumulate(self.omega, &Tensor::new(vec![self.pairs], dw).unwrap());
        grads.accumulate(self.phi, &Tensor::new(vec![self.pairs], dphi).unwrap());
    }
}

/// Clamps a scale prompt into `[0, 1]`, logging when it had to.
pub fn clamp_scale(s: f32) -> f32 {
    if (0.0..=1.0).contains(&s) {
        s
    } else {
        let c = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        log::warn!("scale {s} outside [0, 1], clamped to {c}");
        c
    }
}

/// Feature-wise modulation `X * (1 + a*gamma) + a*beta` with
/// `[gamma, beta] = proj(LN(e))`.
#[derive(Debug, Clone)]
pub struct FilmLayer {
    pub norm: LayerNorm,
    pub proj: Linear,
    pub alpha: ParamId,
    pub dim: usize,
}

pub const FILM_GATE_INIT: f32 = 0.1;

pub struct FilmCache {
    x: Tensor,
    e_norm: Tensor,
    ln: LayerNormCache,
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl FilmLayer {
    /// Projection weights and biases start at zero, so a fresh layer is the
    /// identity for any embedding.
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, embed_width: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), embed_width)?,
            proj: Linear::new(store, &format!("{name}.proj"), embed_width, 2 * dim, Init::Zeros, rng)?,
            alpha: store.add_full(format!("{name}.alpha"), &[1], FILM_GATE_INIT)?,
            dim,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor, e: &Tensor) -> Result<(Tensor, FilmCache)> {
        if x.cols() != self.dim {
            return Err(shape_err(format!("film width {} vs features {}", self.dim, x.cols())));
        }
        let (e_norm, ln) = self.norm.forward(store, e)?;
        let gb = self.proj.forward(store, &e_norm)?;
        let (gamma, beta) = gb.data().split_at(self.dim);
        let a = store.get(self.alpha).data()[0];
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * (1.0 + a * gamma[c]) + a * beta[c];
            }
        }
        Ok((y, FilmCache { x: x.clone(), e_norm, ln, gamma: gamma.to_vec(), beta: beta.to_vec() }))
    }

    /// Returns `(dX, de)`.
    pub fn backward(&self, store: &ParameterStore, cache: &FilmCache, dy: &Tensor, grads: &mut Gradients) -> (Tensor, Tensor) {
        let a = store.get(self.alpha).data()[0];
        let d = self.dim;
        let mut dx = dy.clone();
        let mut sum_dy_x = vec![0.0f64; d];
        let mut sum_dy = vec![0.0f64; d];
        for r in 0..dy.rows() {
            let (g, x) = (dy.row(r), cache.x.row(r));
            for c in 0..d {
                sum_dy_x[c] += g[c] as f64 * x[c] as f64;
                sum_dy[c] += g[c] as f64;
            }
            for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                *v *= 1.0 + a * cache.gamma[c];
            }
        }
        let mut dalpha = 0.0f64;
        let mut dgb = Vec::with_capacity(2 * d);
        for c in 0..d {
            dalpha += cache.gamma[c] as f64 * sum_dy_x[c] + cache.beta[c] as f64 * sum_dy[c];
            dgb.push((a as f64 * sum_dy_x[c]) as f32);
        }
        dgb.extend(sum_dy.iter().map(|&v| (a as f64 * v) as f32));
        grads.accumulate(self.alpha, &Tensor::new(vec![1], vec![dalpha as f32]).unwrap());
        let dgb = Tensor::matrix(1, 2 * d, dgb).unwrap();
        let de_norm = self.proj.backward(store, &cache.e_norm, &dgb, grads);
        let de = self.norm.backward(store, &cache.ln, &de_norm, grads);
        (dx, de)
    }
}
