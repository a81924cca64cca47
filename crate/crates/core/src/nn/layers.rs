//! Parameterised wrappers around the kernels in [`super::ops`].

use rand::Rng;

use super::ops::{self, FfnCache, LayerNormCache, MhaCache, MhaWeights};
use super::{Gradients, ParamId, ParameterStore, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(din), 1/sqrt(din))`.
    Default,
    Uniform(f32),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = match init {
            Init::Default => 1.0 / (din as f32).sqrt(),
            Init::Uniform(b) => b,
            Init::Zeros => 0.0,
        };
        let w = store.add_uniform(format!("{name}.w"), &[din, dout], bound, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[dout])?;
        Ok(Self { w, b, din, dout })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, store.get(self.w), store.get(self.b))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, store: &ParameterStore, x: &Tensor, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let g = ops::linear_backward(x, store.get(self.w), dy);
        grads.accumulate(self.w, &g.dw);
        grads.accumulate(self.b, &g.db);
        g.dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.add_zeros(format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        ops::layer_norm(x, store.get(self.gain), store.get(self.bias), ops::LN_EPS)
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        cache: &LayerNormCache,
        dy: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let g = ops::layer_norm_backward(cache, store.get(self.gain), dy);
        grads.accumulate(self.gain, &g.dgain);
        grads.accumulate(self.bias, &g.dbias);
        g.dx
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::shape_err(format!("attention width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, Init::Default, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, Init::Default, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, Init::Default, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, Init::Default, rng)?,
            heads,
        })
    }

    fn weights<'a>(&self, store: &'a ParameterStore) -> MhaWeights<'a> {
        MhaWeights {
            wq: store.get(self.q.w),
            bq: store.get(self.q.b),
            wk: store.get(self.k.w),
            bk: store.get(self.k.b),
            wv: store.get(self.v.w),
            bv: store.get(self.v.b),
            wo: store.get(self.o.w),
            bo: store.get(self.o.b),
        }
    }

    pub fn forward(&self, store: &ParameterStore, q_in: &Tensor, kv_in: &Tensor) -> Result<(Tensor, MhaCache)> {
        ops::mha(q_in, kv_in, &self.weights(store), self.heads)
    }

    /// Returns `(d q_in, d kv_in)`.
    pub fn backward(
        &self,
        store: &ParameterStore,
        cache: &MhaCache,
        dout: &Tensor,
        grads: &mut Gradients,
    ) -> (Tensor, Tensor) {
        let g = ops::mha_backward(cache, &self.weights(store), dout);
        grads.accumulate(self.q.w, &g.dwq);
        grads.accumulate(self.q.b, &g.dbq);
        grads.accumulate(self.k.w, &g.dwk);
        grads.accumulate(self.k.b, &g.dbk);
        grads.accumulate(self.v.w, &g.dwv);
        grads.accumulate(self.v.b, &g.dbv);
        grads.accumulate(self.o.w, &g.dwo);
        grads.accumulate(self.o.b, &g.dbo);
        (g.dq_in, g.dkv_in)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    /// `dim -> hidden -> dim`; with `zero_out` the second layer starts at
    /// zero so a residual block around it is initially the identity.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        hidden: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let out_init = if zero_out { Init::Zeros } else { Init::Default };
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::Default, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, out_init, rng)?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        ops::ffn(x, store.get(self.fc1.w), store.get(self.fc1.b), store.get(self.fc2.w), store.get(self.fc2.b))
    }

    pub fn backward(&self, store: &ParameterStore, cache: &FfnCache, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let g = ops::ffn_backward(cache, store.get(self.fc1.w), store.get(self.fc2.w), dy);
        grads.accumulate(self.fc1.w, &g.dw1);
        grads.accumulate(self.fc1.b, &g.db1);
        grads.accumulate(self.fc2.w, &g.dw2);
        grads.accumulate(self.fc2.b, &g.db2);
        g.dx
    }
}
