//! Binary annotation-quality classifier over `(x, y, z, l)` points: a shared
//! per-point MLP, max pooling and a small classification head.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedCloud, Stage};
use crate::error::{validation, Result};
use crate::geometry::PartLabelMap;
use crate::nn::{checkpoint, ops, AdamW, Gradients, Init, Linear, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatorConfig {
    /// Fixed cloud size fed to the network.
    pub points: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Fraction of each class held out for the accuracy estimate.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self { points: 2048, epochs: 20, lr: 1e-3, batch: 8, holdout: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatorReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_count: usize,
}

#[derive(Debug, Clone)]
pub struct ValidatorModel {
    pub store: ParameterStore,
    fc1: Linear,
    fc2: Linear,
    head1: Linear,
    head2: Linear,
    /// Cloud size used at training time.
    pub points: usize,
    pub seed: u64,
}

struct Forward {
    x: Tensor,
    pre1: Tensor,
    h1: Tensor,
    pre2: Tensor,
    argmax: Vec<usize>,
    pooled: Tensor,
    pre3: Tensor,
    h3: Tensor,
    prob: f32,
}

impl ValidatorModel {
    pub fn new(points: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let fc1 = Linear::new(&mut store, "validator.fc1", 4, 64, Init::Default, &mut rng)?;
        let fc2 = Linear::new(&mut store, "validator.fc2", 64, 128, Init::Default, &mut rng)?;
        let head1 = Linear::new(&mut store, "validator.head1", 128, 64, Init::Default, &mut rng)?;
        let head2 = Linear::new(&mut store, "validator.head2", 64, 1, Init::Default, &mut rng)?;
        Ok(Self { store, fc1, fc2, head1, head2, points, seed })
    }

    /// `(x, y, z, l / (K - 1))` rows for a fixed-size subsample of the cloud.
    /// The subsample only depends on the cloud id and the model seed.
    fn input(&self, cloud: &AnnotatedCloud) -> Result<Tensor> {
        let labels = cloud.labels.as_ref().ok_or_else(|| validation("validator needs a labelled cloud"))?;
        let n = cloud.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ cloud.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let idx: Vec<usize> = if n >= self.points {
            let mut v = index::sample(&mut rng, n, self.points).into_vec();
            v.sort_unstable();
            v
        } else {
            let mut v: Vec<usize> = (0..n).collect();
            v.extend((n..self.points).map(|_| rng.random_range(0..n)));
            v
        };
        let denom = (labels.part_count().max(2) - 1) as f32;
        let mut data = Vec::with_capacity(idx.len() * 4);
        for &i in &idx {
            let p = cloud.points.get(i);
            data.extend_from_slice(&[p[0], p[1], p[2], labels.labels()[i] as f32 / denom]);
        }
        Tensor::matrix(idx.len(), 4, data)
    }

    fn forward(&self, cloud: &AnnotatedCloud) -> Result<Forward> {
        let s = &self.store;
        let x = self.input(cloud)?;
        let pre1 = self.fc1.forward(s, &x)?;
        let h1 = ops::gelu(&pre1);
        let pre2 = self.fc2.forward(s, &h1)?;
        let h2 = ops::gelu(&pre2);
        let c = h2.cols();
        let mut argmax = vec![0usize; c];
        let mut pooled = vec![f32::NEG_INFINITY; c];
        for r in 0..h2.rows() {
            for (j, &v) in h2.row(r).iter().enumerate() {
                if v > pooled[j] {
                    pooled[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let pooled = Tensor::matrix(1, c, pooled)?;
        let pre3 = self.head1.forward(s, &pooled)?;
        let h3 = ops::gelu(&pre3);
        let logit = self.head2.forward(s, &h3)?;
        let prob = ops::sigmoid(logit.data()[0]);
        Ok(Forward { x, pre1, h1, pre2, argmax, pooled, pre3, h3, prob })
    }

    /// Probability that the cloud's annotation is sound.
    pub fn score(&self, cloud: &AnnotatedCloud) -> Result<f32> {
        Ok(self.forward(cloud)?.prob)
    }

    /// Accumulates gradients of the binary cross-entropy for one cloud.
    fn backward(&self, f: &Forward, target: f32, grads: &mut Gradients) {
        let s = &self.store;
        let dlogit = Tensor::matrix(1, 1, vec![f.prob - target]).unwrap();
        let dh3 = self.head2.backward(s, &f.h3, &dlogit, grads);
        let dpre3 = ops::gelu_backward(&f.pre3, &dh3);
        let dpooled = self.head1.backward(s, &f.pooled, &dpre3, grads);
        let mut dh2 = Tensor::zeros(&[f.pre2.rows(), f.pre2.cols()]);
        let c = f.pre2.cols();
        for (j, &r) in f.argmax.iter().enumerate() {
            dh2.data_mut()[r * c + j] = dpooled.data()[j];
        }
        let dpre2 = ops::gelu_backward(&f.pre2, &dh2);
        let dh1 = self.fc2.backward(s, &f.h1, &dpre2, grads);
        let dpre1 = ops::gelu_backward(&f.pre1, &dh1);
        self.fc1.backward(s, &f.x, &dpre1, grads);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut named = self.store.to_named();
        // Seed split into 16-bit chunks so it survives the f32 round trip.
        let mut cfg = vec![self.points as f32];
        cfg.extend((0..4).map(|k| ((self.seed >> (16 * k)) & 0xFFFF) as f32));
        named.push(("validator.config".into(), Tensor::new(vec![5], cfg)?));
        checkpoint::save_bundle(path, &named)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let named = checkpoint::load_bundle(path)?;
        let cfg = named
            .iter()
            .find(|(n, _)| n == "validator.config")
            .ok_or_else(|| validation("not a validator checkpoint"))?;
        let c = cfg.1.data();
        if c.len() != 5 {
            return Err(validation("malformed validator config tensor"));
        }
        let points = c[0] as usize;
        let seed = (0..4).fold(0u64, |acc, k| acc | ((c[1 + k] as u64) << (16 * k)));
        let mut model = Self::new(points, seed)?;
        model.store.load_named(&named)?;
        Ok(model)
    }
}

/// Permutes the labels of a random `fraction` of the points among themselves.
pub fn corrupt_labels(cloud: &AnnotatedCloud, fraction: f64, seed: u64) -> Result<AnnotatedCloud> {
    let labels = cloud.labels.as_ref().ok_or_else(|| validation("cannot corrupt an unlabelled cloud"))?;
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ((n as f64 * fraction).round() as usize).min(n);
    let picked = index::sample(&mut rng, n, m).into_vec();
    let mut vals: Vec<u32> = picked.iter().map(|&i| labels.labels()[i]).collect();
    vals.shuffle(&mut rng);
    let mut out = labels.labels().to_vec();
    for (&i, v) in picked.iter().zip(vals) {
        out[i] = v;
    }
    Ok(AnnotatedCloud {
        id: cloud.id,
        points: cloud.points.clone(),
        labels: Some(PartLabelMap::new(out, labels.part_count())?),
        stage: cloud.stage,
    })
}

fn accuracy(model: &ValidatorModel, items: &[(&AnnotatedCloud, f32)]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for (c, y) in items {
        let p = model.score(c)?;
        correct += ((p >= 0.5) == (*y >= 0.5)) as usize;
    }
    Ok(correct as f64 / items.len() as f64)
}

type Labelled<'a> = Vec<(&'a AnnotatedCloud, f32)>;

fn split<'a, R: Rng>(set: &'a [AnnotatedCloud], y: f32, holdout: f64, rng: &mut R) -> (Labelled<'a>, Labelled<'a>) {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    let hold = ((set.len() as f64 * holdout).round() as usize).min(set.len().saturating_sub(1));
    let (h, t) = idx.split_at(hold);
    (t.iter().map(|&i| (&set[i], y)).collect(), h.iter().map(|&i| (&set[i], y)).collect())
}

/// Trains the validator on clean (`positives`) and corrupted (`negatives`)
/// clouds with binary cross-entropy and reports held-out accuracy.
pub fn train_validator(
    positives: &[AnnotatedCloud],
    negatives: &[AnnotatedCloud],
    cfg: &ValidatorConfig,
) -> Result<(ValidatorModel, ValidatorReport)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(validation("validator training needs both positive and negative clouds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut held) = split(positives, 1.0, cfg.holdout, &mut rng);
    let (t2, h2) = split(negatives, 0.0, cfg.holdout, &mut rng);
    train.extend(t2);
    held.extend(h2);

    let mut model = ValidatorModel::new(cfg.points, cfg.seed)?;
    let opt = AdamW::new(cfg.lr);
    let mut grads = Gradients::zeros_like(&model.store);
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut loss = 0.0f64;
        for chunk in train.chunks(batch) {
            grads.zero();
            for (c, y) in chunk {
                let f = model.forward(c)?;
                let p = ops::clamp_prob(f.prob) as f64;
                loss -= if *y >= 0.5 { p.ln() } else { (1.0 - p).ln() };
                model.backward(&f, *y, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f32);
            opt.step(&mut model.store, &grads)?;
        }
        log::info!("validator epoch {epoch}: mean bce {:.4}", loss / train.len() as f64);
    }
    let report = ValidatorReport {
        train_accuracy: accuracy(&model, &train)?,
        heldout_accuracy: accuracy(&model, &held)?,
        heldout_count: held.len(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityVerdict {
    pub keep: bool,
    pub score: f32,
}

/// Keeps the cloud iff the validator score reaches `threshold`.
pub fn quality_filter(cloud: &AnnotatedCloud, model: &ValidatorModel, threshold: f32) -> Result<QualityVerdict> {
    let score = model.score(cloud)?;
    Ok(QualityVerdict { keep: score >= threshold, score })
}

impl AnnotatedCloud {
    pub(crate) fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }
}
