use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::contrastive::{contrastive_loss, subsample_anchors, DEFAULT_ANCHORS, DEFAULT_TAU};
use super::triplane::{sample_point_features, sample_point_features_backward, Encoder};
use crate::data::AnnotatedCloud;
use crate::error::{validation, Error, Result};
use crate::nn::{AdamW, Gradients, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderTrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub tau: f32,
    pub anchors: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-5, epochs: 15, tau: DEFAULT_TAU, anchors: DEFAULT_ANCHORS, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderTrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

/// One-object-per-step contrastive training. On a non-finite loss or gradient
/// the store is left at its last good state and [`Error::Diverged`] is
/// returned.
pub fn train_encoder(
    encoder: &Encoder,
    store: &mut ParameterStore,
    clouds: &[AnnotatedCloud],
    cfg: &EncoderTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<EncoderTrainReport> {
    if clouds.is_empty() {
        return Err(validation("encoder training needs at least one cloud"));
    }
    for c in clouds {
        match &c.labels {
            Some(l) if l.part_count() >= 2 => {}
            _ => return Err(validation(format!("cloud {} needs at least two labelled parts", c.id))),
        }
    }
    let opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = Gradients::zeros_like(store);
    let mut report = EncoderTrainReport::default();
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &ci in &order {
            let cloud = &clouds[ci];
            let labels = cloud.labels.as_ref().expect("checked above").labels();
            let batch = subsample_anchors(labels, cfg.anchors, cfg.tau, &mut rng);
            let anchor_pts: Vec<_> = batch.indices.iter().map(|&i| cloud.points.get(i)).collect();

            let (field, cache) = encoder.build_triplane(store, &cloud.points)?;
            let feats = sample_point_features(&field, &anchor_pts).features;
            let out = match contrastive_loss(&feats, &batch.labels, batch.tau) {
                Ok(o) => o,
                Err(Error::NoPositivePairs) => {
                    log::warn!("cloud {}: no positive pairs among anchors, skipped", cloud.id);
                    continue;
                }
                Err(Error::NonFinite(m)) => return Err(Error::Diverged(format!("epoch {epoch}, step {step}: {m}"))),
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {step}: loss {}", out.loss)));
            }
            grads.zero();
            let d_field = sample_point_features_backward(&anchor_pts, &out.grad, encoder.cfg.dim, encoder.cfg.res);
            encoder.backward(store, &cache, &d_field, &mut grads);
            opt.step(store, &grads).map_err(|e| Error::Diverged(format!("epoch {epoch}, step {step}: {e}")))?;
            report.step_losses.push(out.loss);
            on_step(step, out.loss);
            sum += out.loss;
            step += 1;
        }
        let mean = sum / clouds.len() as f64;
        log::info!("encoder epoch {epoch}: mean contrastive loss {mean:.4}");
        report.epoch_means.push(mean);
    }
    Ok(report)
}

/// Mean cosine similarity between features of points in the same part and in
/// different parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartSimilarity {
    pub intra: f64,
    pub inter: f64,
}

pub fn part_similarity(features: &Tensor, labels: &[u32]) -> PartSimilarity {
    let n = features.rows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = features.row(i);
            let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    PartSimilarity { intra: intra / ni.max(1) as f64, inter: inter / nx.max(1) as f64 }
}
