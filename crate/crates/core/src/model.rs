//! Encoder + decoder pair and its `S2AM` bundle.
//!
//! Parameter names keep their `encoder.` / `decoder.` prefixes, so the two
//! stores merge into one bundle. Architecture hyperparameters travel as two
//! extra tensors, `config.encoder` and `config.decoder`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::nn::{checkpoint, ParameterStore, Tensor};

pub const ENCODER_CONFIG: &str = "config.encoder";
pub const DECODER_CONFIG: &str = "config.decoder";

#[derive(Debug, Clone)]
pub struct SegModel {
    pub encoder: Encoder,
    pub encoder_store: ParameterStore,
    pub decoder: Decoder,
    pub decoder_store: ParameterStore,
}

fn encoder_config_tensor(c: &EncoderConfig) -> Tensor {
    let v = [c.dim, c.res, c.lift_hidden[0], c.lift_hidden[1]];
    Tensor::new(vec![4], v.iter().map(|&x| x as f32).collect()).unwrap()
}

fn decoder_config_tensor(c: &DecoderConfig) -> Tensor {
    let v = [c.dim, c.heads, c.ffn_hidden, c.scale_pairs, c.modulator_layers, c.cross_layers, c.anchors];
    Tensor::new(vec![7], v.iter().map(|&x| x as f32).collect()).unwrap()
}

fn config_values(named: &[(String, Tensor)], name: &str, len: usize) -> Result<Vec<usize>> {
    let t = named
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("bundle has no {name} tensor")))?;
    if t.len() != len || t.data().iter().any(|&v| !(v >= 0.0 && v.fract() == 0.0 && v < 1e7)) {
        return Err(Error::Format(format!("malformed {name} tensor")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

impl SegModel {
    /// Freshly initialised model; encoder and decoder draw from separate
    /// seeded streams.
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, seed: u64) -> Result<Self> {
        if enc.dim != dec.dim {
            return Err(Error::Shape(format!("encoder width {} vs decoder width {}", enc.dim, dec.dim)));
        }
        let mut encoder_store = ParameterStore::new();
        let encoder = Encoder::new(&mut encoder_store, enc, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut decoder_store = ParameterStore::new();
        let decoder = Decoder::new(&mut decoder_store, dec, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66))?;
        Ok(Self { encoder, encoder_store, decoder, decoder_store })
    }

    /// Per-point encoder features `N x D`.
    pub fn features(&self, points: &PointSet) -> Result<Tensor> {
        self.encoder.features(&self.encoder_store, points)
    }

    /// Decoder probabilities for one prompt given precomputed features.
    pub fn decode(&self, features: &Tensor, points: &PointSet, prompt: usize, scale: Option<f32>) -> Result<Vec<f32>> {
        Ok(self.decoder.forward(&self.decoder_store, features, points.coords(), prompt, scale, None)?.0)
    }

    pub fn tensor_count(&self) -> usize {
        self.encoder_store.len() + self.decoder_store.len() + 2
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut named = vec![
            (ENCODER_CONFIG.to_string(), encoder_config_tensor(&self.encoder.cfg)),
            (DECODER_CONFIG.to_string(), decoder_config_tensor(&self.decoder.cfg)),
        ];
        named.extend(self.encoder_store.to_named());
        named.extend(self.decoder_store.to_named());
        named
    }

    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let e = config_values(named, ENCODER_CONFIG, 4)?;
        let d = config_values(named, DECODER_CONFIG, 7)?;
        let enc = EncoderConfig { dim: e[0], res: e[1], lift_hidden: [e[2], e[3]] };
        let dec = DecoderConfig {
            dim: d[0],
            heads: d[1],
            ffn_hidden: d[2],
            scale_pairs: d[3],
            modulator_layers: d[4],
            cross_layers: d[5],
            anchors: d[6],
        };
        if enc.res < 2 || enc.dim == 0 {
            return Err(Error::Format("malformed encoder config".into()));
        }
        let mut model = Self::new(enc, dec, 0).map_err(|e| Error::Format(e.to_string()))?;
        let pick = |prefix: &str| -> Vec<(String, Tensor)> {
            named.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect()
        };
        model.encoder_store.load_named(&pick("encoder.")).map_err(|e| Error::Format(e.to_string()))?;
        model.decoder_store.load_named(&pick("decoder.")).map_err(|e| Error::Format(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_bundle(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(&checkpoint::load_bundle(path)?)
    }
}
