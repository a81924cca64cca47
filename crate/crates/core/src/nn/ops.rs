//! Forward/backward kernels. Every function here is pure; the module
//! wrappers in [`super::layers`] route parameters and gradients through a
//! [`super::ParameterStore`].

use super::Tensor;
use crate::error::{shape_err, Result};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn of(t: &'a Tensor) -> Self {
        Self::new(t.data(), t.rows(), t.cols())
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Columns `[start, start + width)` of a row-major matrix.
    pub fn col_block(self, start: usize, width: usize) -> Self {
        debug_assert!(self.cs == 1 && start + width <= self.cols);
        Self { data: &self.data[start..], cols: width, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub(crate) struct MatMut<'a> {
    data: &'a mut [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn col_block(data: &'a mut [f32], rows: usize, row_stride: usize, start: usize, width: usize) -> Self {
        Self { data: &mut data[start..], rows, cols: width, rs: row_stride, cs: 1 }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `C = alpha * A B + beta * C`.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == 0.0 { 0.0 } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above for the extents and
    // strides passed to sgemm, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Plain row-major product `A (m x k) * B (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(shape_err(format!("matmul {}x{} by {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm(1.0, MatRef::of(a), MatRef::of(b), 0.0, MatMut::new(out.data_mut(), a.rows(), b.cols()));
    Ok(out)
}

/// Column sums accumulated in binary64.
pub(crate) fn col_sums(t: &Tensor) -> Vec<f32> {
    let c = t.cols();
    let mut acc = vec![0.0f64; c];
    for r in 0..t.rows() {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += *v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

// ---------------------------------------------------------------- linear

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// `y = x W + b` with `x: rows x din`, `W: din x dout`, `b: dout`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (din, dout) = (w.rows(), w.cols());
    if x.cols() != din || b.len() != dout {
        return Err(shape_err(format!(
            "linear: input width {} vs weight {din}x{dout}, bias {}",
            x.cols(),
            b.len()
        )));
    }
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    gemm(1.0, MatRef::new(x.data(), rows, din), MatRef::of(w), 1.0, MatMut::new(&mut data, rows, dout));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, data)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> LinearGrads {
    let (din, dout) = (w.rows(), w.cols());
    let rows = x.rows();
    let mut dx = Tensor::zeros(x.shape());
    gemm(1.0, MatRef::new(dy.data(), rows, dout), MatRef::of(w).t(), 0.0, MatMut::new(dx.data_mut(), rows, din));
    let mut dw = Tensor::zeros(&[din, dout]);
    gemm(
        1.0,
        MatRef::new(x.data(), rows, din).t(),
        MatRef::new(dy.data(), rows, dout),
        0.0,
        MatMut::new(dw.data_mut(), din, dout),
    );
    let db = Tensor::new(vec![dout], col_sums(dy)).expect("bias grad shape");
    LinearGrads { dx, dw, db }
}

// ------------------------------------------------------------ layer norm

pub const LN_EPS: f32 = 1e-5;

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgain: Tensor,
    pub dbias: Tensor,
}

/// Row-wise normalisation to zero mean and unit variance, then `gain * xhat + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(format!("layer_norm width {d} vs affine {}/{}", gain.len(), bias.len())));
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    let (g, b) = (gain.data(), bias.data());
    for ((row, xh), yr) in x.data().chunks_exact(d).zip(xhat.data_mut().chunks_exact_mut(d)).zip(y.data_mut().chunks_exact_mut(d)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(is as f32);
        for c in 0..d {
            let h = ((row[c] as f64 - mean) * is) as f32;
            xh[c] = h;
            yr[c] = g[c] * h + b[c];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> LayerNormGrads {
    let d = dy.cols();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = vec![0.0f64; d];
    let mut dbias = vec![0.0f64; d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut mean_dxh = 0.0f64;
        let mut mean_dxh_xh = 0.0f64;
        for c in 0..d {
            dgain[c] += (g[c] * xh[c]) as f64;
            dbias[c] += g[c] as f64;
            let dxh = (g[c] * gain.data()[c]) as f64;
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c] as f64;
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let is = cache.inv_std[r] as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            let dxh = (g[c] * gain.data()[c]) as f64;
            out[c] = (is * (dxh - mean_dxh - xh[c] as f64 * mean_dxh_xh)) as f32;
        }
    }
    LayerNormGrads {
        dx,
        dgain: Tensor::new(vec![d], dgain.into_iter().map(|v| v as f32).collect()).unwrap(),
        dbias: Tensor::new(vec![d], dbias.into_iter().map(|v| v as f32).collect()).unwrap(),
    }
}

// ----------------------------------------------------------- activations

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
/// `tanh` through a single `exp`; saturates cleanly at both ends.
#[inline]
fn tanh_fast(u: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| 0.5 * v * (1.0 + tanh_fast(GELU_C * (v + GELU_A * v * v * v)))).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = tanh_fast(GELU_C * (v + GELU_A * v * v * v));
            let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * d
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f32 = 1e-7;

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f32) -> f32 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// In-place numerically stable softmax of one row (binary64 normaliser).
pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

// ------------------------------------------------------------- attention

/// Projection weights of one multi-head attention block; all `D x D`.
pub struct MhaWeights<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

pub struct MhaCache {
    q_in: Tensor,
    kv_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// heads x Lq x Lk attention probabilities.
    attn: Vec<f32>,
    o: Tensor,
    heads: usize,
}

pub struct MhaGrads {
    pub dq_in: Tensor,
    pub dkv_in: Tensor,
    pub dwq: Tensor,
    pub dbq: Tensor,
    pub dwk: Tensor,
    pub dbk: Tensor,
    pub dwv: Tensor,
    pub dbv: Tensor,
    pub dwo: Tensor,
    pub dbo: Tensor,
}

/// Multi-head scaled dot-product attention: queries from `q_in (Lq x D)`,
/// keys and values from `kv_in (Lk x D)`, softmax over keys, heads
/// concatenated and projected by `Wo`.
pub fn mha(q_in: &Tensor, kv_in: &Tensor, w: &MhaWeights<'_>, heads: usize) -> Result<(Tensor, MhaCache)> {
    let d = q_in.cols();
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(format!("attention width {d} not divisible by {heads} heads")));
    }
    if kv_in.cols() != d {
        return Err(shape_err(format!("attention key width {} vs query width {d}", kv_in.cols())));
    }
    let (lq, lk) = (q_in.rows(), kv_in.rows());
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let q = linear(q_in, w.wq, w.bq)?;
    let k = linear(kv_in, w.wk, w.bk)?;
    let v = linear(kv_in, w.wv, w.bv)?;
    let mut attn = vec![0.0f32; heads * lq * lk];
    let mut o = Tensor::zeros(&[lq, d]);
    for h in 0..heads {
        let a = &mut attn[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            scale,
            MatRef::of(&q).col_block(h * dh, dh),
            MatRef::of(&k).col_block(h * dh, dh).t(),
            0.0,
            MatMut::new(a, lq, lk),
        );
        for row in a.chunks_mut(lk) {
            softmax_row(row);
        }
        gemm(
            1.0,
            MatRef::new(a, lq, lk),
            MatRef::of(&v).col_block(h * dh, dh),
            0.0,
            MatMut::col_block(o.data_mut(), lq, d, h * dh, dh),
        );
    }
    let out = linear(&o, w.wo, w.bo)?;
    let cache = MhaCache { q_in: q_in.clone(), kv_in: kv_in.clone(), q, k, v, attn, o, heads };
    Ok((out, cache))
}

pub fn mha_backward(cache: &MhaCache, w: &MhaWeights<'_>, dout: &Tensor) -> MhaGrads {
    let d = cache.q.cols();
    let (lq, lk) = (cache.q.rows(), cache.k.rows());
    let heads = cache.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let out_g = linear_backward(&cache.o, w.wo, dout);
    let d_o = out_g.dx;
    let mut dq = Tensor::zeros(&[lq, d]);
    let mut dk = Tensor::zeros(&[lk, d]);
    let mut dv = Tensor::zeros(&[lk, d]);
    let mut da = vec![0.0f32; lq * lk];
    for h in 0..heads {
        let a = &cache.attn[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            1.0,
            MatRef::of(&d_o).col_block(h * dh, dh),
            MatRef::of(&cache.v).col_block(h * dh, dh).t(),
            0.0,
            MatMut::new(&mut da, lq, lk),
        );
        gemm(
            1.0,
            MatRef::new(a, lq, lk).t(),
            MatRef::of(&d_o).col_block(h * dh, dh),
            0.0,
            MatMut::col_block(dv.data_mut(), lk, d, h * dh, dh),
        );
        for (ds_row, a_row) in da.chunks_mut(lk).zip(a.chunks(lk)) {
            let dot: f64 = ds_row.iter().zip(a_row).map(|(g, p)| (*g as f64) * (*p as f64)).sum();
            let dot = dot as f32;
            for (g, p) in ds_row.iter_mut().zip(a_row) {
                *g = p * (*g - dot);
            }
        }
        gemm(
            scale,
            MatRef::new(&da, lq, lk),
            MatRef::of(&cache.k).col_block(h * dh, dh),
            0.0,
            MatMut::col_block(dq.data_mut(), lq, d, h * dh, dh),
        );
        gemm(
            scale,
            MatRef::new(&da, lq, lk).t(),
            MatRef::of(&cache.q).col_block(h * dh, dh),
            0.0,
            MatMut::col_block(dk.data_mut(), lk, d, h * dh, dh),
        );
    }
    let qg = linear_backward(&cache.q_in, w.wq, &dq);
    let kg = linear_backward(&cache.kv_in, w.wk, &dk);
    let vg = linear_backward(&cache.kv_in, w.wv, &dv);
    let mut dkv_in = kg.dx;
    dkv_in.add_assign(&vg.dx);
    MhaGrads {
        dq_in: qg.dx,
        dkv_in,
        dwq: qg.dw,
        dbq: qg.db,
        dwk: kg.dw,
        dbk: kg.db,
        dwv: vg.dw,
        dbv: vg.db,
        dwo: out_g.dw,
        dbo: out_g.db,
    }
}

// -------------------------------------------------------------------- ffn

pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

pub struct FfnGrads {
    pub dx: Tensor,
    pub dw1: Tensor,
    pub db1: Tensor,
    pub dw2: Tensor,
    pub db2: Tensor,
}

/// Two-layer GELU MLP `D -> hidden -> D`. Residual connections are the
/// caller's business.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<(Tensor, FfnCache)> {
    let pre = linear(x, w1, b1)?;
    let hidden = gelu(&pre);
    let y = linear(&hidden, w2, b2)?;
    Ok((y, FfnCache { x: x.clone(), pre, hidden }))
}

pub fn ffn_backward(cache: &FfnCache, w1: &Tensor, w2: &Tensor, dy: &Tensor) -> FfnGrads {
    let g2 = linear_backward(&cache.hidden, w2, dy);
    let dpre = gelu_backward(&cache.pre, &g2.dx);
    let g1 = linear_backward(&cache.x, w1, &dpre);
    FfnGrads { dx: g1.dx, dw1: g1.dw, db1: g1.db, dw2: g2.dw, db2: g2.db }
}
