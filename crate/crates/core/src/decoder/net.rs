//! The full prompt decoder: `X0 = F + PE(P)`, FiLM-modulated transformer
//! stack, bi-directional cross-attention from the prompt row, mask head.

use rand::Rng;

use super::blocks::{BlockCache, CrossCache, CrossLayer, HeadCache, MaskHead, TransformerBlock};
use super::embed::{FilmCache, FilmLayer, PositionalEncoding, ScaleEmbedding};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{dist2, Point3};
use crate::nn::{Gradients, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Frequency pairs `M` of the scale embedding.
    pub scale_pairs: usize,
    /// FiLM + transformer layers `L_m`.
    pub modulator_layers: usize,
    /// Cross-attention layers `L_d`.
    pub cross_layers: usize,
    /// Self-attention key/value set size when a cloud has more points.
    pub anchors: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 96, heads: 4, ffn_hidden: 192, scale_pairs: 64, modulator_layers: 2, cross_layers: 4, anchors: 256 }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub pe: PositionalEncoding,
    pub scale: ScaleEmbedding,
    pub films: Vec<FilmLayer>,
    pub blocks: Vec<TransformerBlock>,
    pub cross: Vec<CrossLayer>,
    pub head: MaskHead,
}

pub struct ModulatorCache {
    scale: Option<f32>,
    films: Vec<Option<FilmCache>>,
    blocks: Vec<BlockCache>,
}

pub struct CrossStackCache {
    prompt: usize,
    layers: Vec<CrossCache>,
}

pub struct DecoderCache {
    modulator: ModulatorCache,
    cross: CrossStackCache,
    head: HeadCache,
}

/// Farthest-point subset of `count` indices, seeded at the point farthest
/// from the centroid (ties to the lower index). Depends only on geometry, so
/// permuting the input permutes the selection accordingly.
pub fn select_anchors(points: &[Point3], count: usize) -> Vec<usize> {
    let n = points.len();
    if count >= n {
        return (0..n).collect();
    }
    if count == 0 {
        return Vec::new();
    }
    let mut centroid = [0.0f64; 3];
    for p in points {
        (0..3).for_each(|k| centroid[k] += p[k] as f64);
    }
    let c = centroid.map(|v| (v / n as f64) as f32);
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        best
    };
    let from_c: Vec<f64> = points.iter().map(|p| dist2(p, &c)).collect();
    let mut chosen = vec![argmax(&from_c)];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < count {
        let next = argmax(&nearest);
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    chosen
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(shape_err(format!("decoder width {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let pe = PositionalEncoding::new(cfg.dim)?;
        let scale = ScaleEmbedding::new(store, "decoder.scale", cfg.scale_pairs)?;
        let mut films = Vec::new();
        let mut blocks = Vec::new();
        for l in 0..cfg.modulator_layers {
            films.push(FilmLayer::new(store, &format!("decoder.mod.{l}.film"), scale.width(), cfg.dim, rng)?);
            blocks.push(TransformerBlock::new(store, &format!("decoder.mod.{l}.block"), cfg.dim, cfg.heads, cfg.ffn_hidden, rng)?);
        }
        let cross = (0..cfg.cross_layers)
            .map(|l| CrossLayer::new(store, &format!("decoder.cross.{l}"), cfg.dim, cfg.heads, cfg.ffn_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = MaskHead::new(store, "decoder.head", cfg.dim, rng)?;
        Ok(Self { cfg, pe, scale, films, blocks, cross, head })
    }

    /// `F + PE(P)`.
    pub fn input(&self, features: &Tensor, points: &[Point3]) -> Result<Tensor> {
        if features.cols() != self.cfg.dim || features.rows() != points.len() {
            return Err(shape_err(format!(
                "decoder expects {} x {} features, got {:?}",
                points.len(),
                self.cfg.dim,
                features.shape()
            )));
        }
        let mut x = self.pe.encode(points);
        x.add_assign(features);
        Ok(x)
    }

    /// `X^(l+1) = T_l(FiLM_l(X^(l); s))`. With `scale == None` every FiLM
    /// layer is skipped.
    pub fn modulate(
        &self,
        store: &ParameterStore,
        x0: &Tensor,
        scale: Option<f32>,
        anchors: &[usize],
    ) -> Result<(Tensor, ModulatorCache)> {
        if let Some(&bad) = anchors.iter().find(|&&a| a >= x0.rows()) {
            return Err(shape_err(format!("anchor {bad} out of range for {} rows", x0.rows())));
        }
        let e = scale.map(|s| self.scale.embed(store, s));
        let mut x = x0.clone();
        let mut films = Vec::with_capacity(self.films.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (film, block) in self.films.iter().zip(&self.blocks) {
            if let Some(e) = &e {
                let (y, c) = film.forward(store, &x, e)?;
                x = y;
                films.push(Some(c));
            } else {
                films.push(None);
            }
            let (y, c) = block.forward(store, &x, anchors)?;
            x = y;
            blocks.push(c);
        }
        Ok((x, ModulatorCache { scale, films, blocks }))
    }

    pub fn modulate_backward(&self, store: &ParameterStore, cache: &ModulatorCache, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let mut dx = dy.clone();
        let mut de: Option<Tensor> = None;
        for l in (0..self.blocks.len()).rev() {
            dx = self.blocks[l].backward(store, &cache.blocks[l], &dx, grads);
            if let Some(fc) = &cache.films[l] {
                let (d, e) = self.films[l].backward(store, fc, &dx, grads);
                dx = d;
                match &mut de {
                    Some(acc) => acc.add_assign(&e),
                    None => de = Some(e),
                }
            }
        }
        if let (Some(s), Some(de)) = (cache.scale, de) {
            self.scale.backward(store, s, &de, grads);
        }
        dx
    }

    /// `q^(0) = F~[p]`, `Y^(0) = F~`, then `L_d` cross layers; returns `H`.
    pub fn cross_attend(&self, store: &ParameterStore, f: &Tensor, prompt: usize) -> Result<(Tensor, CrossStackCache)> {
        if prompt >= f.rows() {
            return Err(Error::InvalidPrompt(format!("prompt index {prompt} out of range for {} points", f.rows())));
        }
        let mut q = f.gather_rows(&[prompt]);
        let mut y = f.clone();
        let mut layers = Vec::with_capacity(self.cross.len());
        for layer in &self.cross {
            let (q1, y1, c) = layer.forward(store, &q, &y)?;
            q = q1;
            y = y1;
            layers.push(c);
        }
        Ok((y, CrossStackCache { prompt, layers }))
    }

    pub fn cross_backward(&self, store: &ParameterStore, cache: &CrossStackCache, dh: &Tensor, grads: &mut Gradients) -> Tensor {
        let mut dq = Tensor::zeros(&[1, dh.cols()]);
        let mut dy = dh.clone();
        for (layer, c) in self.cross.iter().zip(&cache.layers).rev() {
            let (a, b) = layer.backward(store, c, &dq, &dy, grads);
            dq = a;
            dy = b;
        }
        dy.row_mut(cache.prompt).iter_mut().zip(dq.data()).for_each(|(a, b)| *a += b);
        dy
    }

    /// Anchor set used for a cloud of this size.
    pub fn anchors_for(&self, points: &[Point3]) -> Vec<usize> {
        select_anchors(points, self.cfg.anchors)
    }

    /// Per-point probabilities for one prompt. `anchors == None` picks the
    /// default anchor set for the cloud.
    pub fn forward(
        &self,
        store: &ParameterStore,
        features: &Tensor,
        points: &[Point3],
        prompt: usize,
        scale: Option<f32>,
        anchors: Option<&[usize]>,
    ) -> Result<(Vec<f32>, DecoderCache)> {
        if prompt >= points.len() {
            return Err(Error::InvalidPrompt(format!("prompt index {prompt} out of range for {} points", points.len())));
        }
        let x0 = self.input(features, points)?;
        let default;
        let anchors = match anchors {
            Some(a) => a,
            None => {
                default = self.anchors_for(points);
                &default
            }
        };
        let (f, modulator) = self.modulate(store, &x0, scale, anchors)?;
        let (h, cross) = self.cross_attend(store, &f, prompt)?;
        let (probs, head) = self.head.forward(store, &h)?;
        Ok((probs, DecoderCache { modulator, cross, head }))
    }

    /// Accumulates parameter gradients from `dL/dp` and returns `dL/dF`.
    pub fn backward(&self, store: &ParameterStore, cache: &DecoderCache, dprobs: &[f32], grads: &mut Gradients) -> Tensor {
        let dh = self.head.backward(store, &cache.head, dprobs, grads);
        let df = self.cross_backward(store, &cache.cross, &dh, grads);
        self.modulate_backward(store, &cache.modulator, &df, grads)
    }
}
