//! Transformer block over an anchor set, bi-directional cross-attention
//! layer and the mask head.

use rand::Rng;

use crate::error::Result;
use crate::nn::ops::{self, FfnCache, LayerNormCache, MhaCache};
use crate::nn::{Attention, FeedForward, Gradients, Init, LayerNorm, Linear, ParameterStore, Tensor};

/// Pre-norm block: `Z = X + MHA(LN1(X), LN1(X)[anchors])`,
/// `out = Z + FFN(LN2(Z))`. With every row an anchor this is plain
/// self-attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    anchors: Vec<usize>,
    attn: MhaCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, false, rng)?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor, anchors: &[usize]) -> Result<(Tensor, BlockCache)> {
        let (a, ln1) = self.ln1.forward(store, x)?;
        let kv = a.gather_rows(anchors);
        let (att, attn) = self.attn.forward(store, &a, &kv)?;
        let mut z = x.clone();
        z.add_assign(&att);
        let (b, ln2) = self.ln2.forward(store, &z)?;
        let (f, ffn) = self.ffn.forward(store, &b)?;
        z.add_assign(&f);
        Ok((z, BlockCache { ln1, anchors: anchors.to_vec(), attn, ln2, ffn }))
    }

    pub fn backward(&self, store: &ParameterStore, cache: &BlockCache, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let db = self.ffn.backward(store, &cache.ffn, dy, grads);
        let mut dz = self.ln2.backward(store, &cache.ln2, &db, grads);
        dz.add_assign(dy);
        let (mut da, dkv) = self.attn.backward(store, &cache.attn, &dz, grads);
        for (j, &i) in cache.anchors.iter().enumerate() {
            da.row_mut(i).iter_mut().zip(dkv.row(j)).for_each(|(a, b)| *a += b);
        }
        let mut dx = self.ln1.backward(store, &cache.ln1, &da, grads);
        dx.add_assign(&dz);
        dx
    }
}

/// One round of prompt/point exchange:
///
/// ```text
/// q <- q + CAttn(q; Y)
/// Y <- FFN(Y + CAttn(Y; q))
/// ```
///
/// where `CAttn(a; b) = MHA(LN(a), LN(b))` and `FFN(z) = z + MLP(LN(z))`.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub q_norm: LayerNorm,
    pub y_norm: LayerNorm,
    pub to_points: Attention,
    pub y_norm2: LayerNorm,
    pub q_norm2: LayerNorm,
    pub to_prompt: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

pub struct CrossCache {
    qn: LayerNormCache,
    yn: LayerNormCache,
    a1: MhaCache,
    yn2: LayerNormCache,
    qn2: LayerNormCache,
    a2: MhaCache,
    fln: LayerNormCache,
    ffn: FfnCache,
}

impl CrossLayer {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q_norm: LayerNorm::new(store, &format!("{name}.q_norm"), dim)?,
            y_norm: LayerNorm::new(store, &format!("{name}.y_norm"), dim)?,
            to_points: Attention::new(store, &format!("{name}.q2y"), dim, heads, rng)?,
            y_norm2: LayerNorm::new(store, &format!("{name}.y_norm2"), dim)?,
            q_norm2: LayerNorm::new(store, &format!("{name}.q_norm2"), dim)?,
            to_prompt: Attention::new(store, &format!("{name}.y2q"), dim, heads, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, false, rng)?,
        })
    }

    /// Returns the updated `(q, Y)`.
    pub fn forward(&self, store: &ParameterStore, q: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor, CrossCache)> {
        let (qa, qn) = self.q_norm.forward(store, q)?;
        let (ya, yn) = self.y_norm.forward(store, y)?;
        let (t1, a1) = self.to_points.forward(store, &qa, &ya)?;
        let mut q1 = q.clone();
        q1.add_assign(&t1);

        let (yb, yn2) = self.y_norm2.forward(store, y)?;
        let (qb, qn2) = self.q_norm2.forward(store, &q1)?;
        let (t2, a2) = self.to_prompt.forward(store, &yb, &qb)?;
        let mut z = y.clone();
        z.add_assign(&t2);
        let (zf, fln) = self.ffn_norm.forward(store, &z)?;
        let (g, ffn) = self.ffn.forward(store, &zf)?;
        z.add_assign(&g);
        Ok((q1, z, CrossCache { qn, yn, a1, yn2, qn2, a2, fln, ffn }))
    }

    /// Given gradients w.r.t. the layer outputs, returns `(dq, dY)` w.r.t. its inputs.
    pub fn backward(
        &self,
        store: &ParameterStore,
        cache: &CrossCache,
        dq1: &Tensor,
        dy1: &Tensor,
        grads: &mut Gradients,
    ) -> (Tensor, Tensor) {
        let dg = self.ffn.backward(store, &cache.ffn, dy1, grads);
        let mut dz = self.ffn_norm.backward(store, &cache.fln, &dg, grads);
        dz.add_assign(dy1);

        let (dyb, dqb) = self.to_prompt.backward(store, &cache.a2, &dz, grads);
        let mut dy = dz;
        dy.add_assign(&self.y_norm2.backward(store, &cache.yn2, &dyb, grads));
        let mut dq = dq1.clone();
        dq.add_assign(&self.q_norm2.backward(store, &cache.qn2, &dqb, grads));

        let (dqa, dya) = self.to_points.backward(store, &cache.a1, &dq, grads);
        dq.add_assign(&self.q_norm.backward(store, &cache.qn, &dqa, grads));
        dy.add_assign(&self.y_norm.backward(store, &cache.yn, &dya, grads));
        (dq, dy)
    }
}

/// `sigmoid(W2 GELU(W1 LN(H) + b1) + b2)`, `D -> D/2 -> 1`, clamped away
/// from 0 and 1. The output layer starts at zero (all probabilities 0.5).
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct HeadCache {
    ln: LayerNormCache,
    h0: Tensor,
    pre: Tensor,
    hidden: Tensor,
    probs: Vec<f32>,
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let hidden = (dim / 2).max(1);
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::Default, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 1, Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, h: &Tensor) -> Result<(Vec<f32>, HeadCache)> {
        let (h0, ln) = self.norm.forward(store, h)?;
        let pre = self.fc1.forward(store, &h0)?;
        let hidden = ops::gelu(&pre);
        let logits = self.fc2.forward(store, &hidden)?;
        let probs: Vec<f32> = logits.data().iter().map(|&l| ops::clamp_prob(ops::sigmoid(l))).collect();
        Ok((probs.clone(), HeadCache { ln, h0, pre, hidden, probs }))
    }

    /// Backward from `dL/dp`. The clamp is treated as pass-through, with the
    /// sigmoid slope evaluated at the clamped probability.
    pub fn backward(&self, store: &ParameterStore, cache: &HeadCache, dprobs: &[f32], grads: &mut Gradients) -> Tensor {
        let dlogit: Vec<f32> = cache.probs.iter().zip(dprobs).map(|(&p, &g)| g * p * (1.0 - p)).collect();
        let dlogit = Tensor::matrix(dlogit.len(), 1, dlogit).unwrap();
        let dhidden = self.fc2.backward(store, &cache.hidden, &dlogit, grads);
        let dpre = ops::gelu_backward(&cache.pre, &dhidden);
        let dh0 = self.fc1.backward(store, &cache.h0, &dpre, grads);
        self.norm.backward(store, &cache.ln, &dh0, grads)
    }
}
