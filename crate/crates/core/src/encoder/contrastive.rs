use rand::seq::index;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_TAU: f32 = 0.07;
pub const DEFAULT_ANCHORS: usize = 1000;

/// Anchor points drawn from a single instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub tau: f32,
}

/// Uniform sampling of `n_hat` anchors without replacement. Asking for more
/// anchors than points uses every point.
pub fn subsample_anchors<R: Rng>(labels: &[u32], n_hat: usize, tau: f32, rng: &mut R) -> ContrastiveBatch {
    let n = labels.len();
    let indices = if n_hat >= n {
        if n_hat > n {
            log::debug!("requested {n_hat} anchors from a {n}-point cloud; using all points");
        }
        (0..n).collect()
    } else {
        let mut idx = index::sample(rng, n, n_hat).into_vec();
        idx.sort_unstable();
        idx
    };
    let labels = indices.iter().map(|&i| labels[i]).collect();
    ContrastiveBatch { indices, labels, tau }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to the un-normalised feature rows.
    pub grad: Tensor,
    /// Anchors that had at least one positive and entered the mean.
    pub active_anchors: usize,
}

const NORM_FLOOR: f64 = 1e-12;

/// Intra-instance supervised contrastive loss on cosine similarities.
///
/// For every anchor `i` with a non-empty positive set `P(i)`:
/// `-log(sum_{j in P(i)} exp(s_ij) / sum_{j != i} exp(s_ij))`, `s_ij = f_i.f_j / tau`
/// on L2-normalised rows. The loss is the mean over those anchors.
pub fn contrastive_loss(features: &Tensor, labels: &[u32], tau: f32) -> Result<ContrastiveOutput> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for {n} feature rows", labels.len())));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("contrastive features".into()));
    }
    let tau = tau as f64;

    let mut norms = vec![0.0f64; n];
    let mut unit = vec![0.0f64; n * d];
    for i in 0..n {
        let row = features.row(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt().max(NORM_FLOOR);
        norms[i] = norm;
        for (o, &v) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = v as f64 / norm;
        }
    }
    let mut sim = vec![0.0f64; n * n];
    dgemm(&unit, n, d, true, &unit, n, &mut sim);

    let active: Vec<bool> = (0..n).map(|i| (0..n).any(|j| j != i && labels[j] == labels[i])).collect();
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(Error::NoPositivePairs);
    }
    let inv_count = 1.0 / count as f64;

    // g[i][j] = dL/ds_ij / tau, so it applies to unit rows directly.
    let mut g = vec![0.0f64; n * n];
    let mut loss = 0.0f64;
    let mut w = vec![0.0f64; n];
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let srow = &sim[i * n..(i + 1) * n];
        let max = (0..n).filter(|&j| j != i).map(|j| srow[j] / tau).fold(f64::NEG_INFINITY, f64::max);
        let (mut all, mut pos) = (0.0f64, 0.0f64);
        for j in 0..n {
            if j == i {
                w[j] = 0.0;
                continue;
            }
            let e = (srow[j] / tau - max).exp();
            w[j] = e;
            all += e;
            if labels[j] == labels[i] {
                pos += e;
            }
        }
        loss += (all.ln() - pos.ln()) * inv_count;
        let grow = &mut g[i * n..(i + 1) * n];
        for j in 0..n {
            if j == i {
                continue;
            }
            let q = if labels[j] == labels[i] { w[j] / pos } else { 0.0 };
            grow[j] = (w[j] / all - q) * inv_count / tau;
        }
    }

    // dL/du = (G + G^T) u, then through the row normalisation.
    let mut sym = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = g[i * n + j] + g[j * n + i];
        }
    }
    let mut du = vec![0.0f64; n * d];
    dgemm(&sym, n, n, false, &unit, d, &mut du);
    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let u = &unit[i * d..(i + 1) * d];
        let gu = &du[i * d..(i + 1) * d];
        let dot: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[i];
        for ((o, &ui), &gi) in grad.row_mut(i).iter_mut().zip(u).zip(gu) {
            *o = ((gi - ui * dot) * inv) as f32;
        }
    }
    Ok(ContrastiveOutput { loss, grad, active_anchors: count })
}

/// `C = A B` (or `A B^T` with `b_t`) in binary64; `A` is `m x k`, `C` is `m x n`.
fn dgemm(a: &[f64], m: usize, k: usize, b_t: bool, b: &[f64], n: usize, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were asserted to cover the m x k, k x n and m x n extents.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}
