use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{seg_loss, SegLoss, SegLossConfig};
use crate::data::AnnotatedCloud;
use crate::decoder::{scale_dropout, Decoder, DEFAULT_SCALE_DROPOUT};
use crate::encoder::{sample_point_features, Encoder};
use crate::error::{validation, Error, Result};
use crate::geometry::Point3;
use crate::inference::{part_scale, prompt_points};
use crate::nn::{AdamW, Gradients, ParameterStore};

/// One supervised target: a part of one cloud, its prompt and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub cloud_id: u64,
    pub part: usize,
    pub mask: Vec<bool>,
    pub prompt: usize,
    /// Positive ratio of the part.
    pub scale: f32,
    pub scale_present: bool,
}

impl TrainSample {
    pub fn scale_prompt(&self) -> Option<f32> {
        self.scale_present.then_some(self.scale)
    }
}

/// Uniform part choice with per-cloud prompt points computed once.
pub struct TargetSampler<'a> {
    clouds: &'a [AnnotatedCloud],
    prompts: Vec<Vec<usize>>,
}

impl<'a> TargetSampler<'a> {
    pub fn new(clouds: &'a [AnnotatedCloud]) -> Result<Self> {
        let mut prompts = Vec::with_capacity(clouds.len());
        for c in clouds {
            match &c.labels {
                Some(l) if l.part_count() >= 2 => prompts.push(prompt_points(l, &c.points)),
                _ => return Err(validation(format!("cloud {} needs at least two labelled parts", c.id))),
            }
        }
        Ok(Self { clouds, prompts })
    }

    pub fn sample<R: Rng>(&self, cloud: usize, rng: &mut R) -> TrainSample {
        let c = &self.clouds[cloud];
        let labels = c.labels.as_ref().expect("checked in new");
        let part = rng.random_range(0..labels.part_count());
        TrainSample {
            cloud_id: c.id,
            part,
            mask: labels.mask(part),
            prompt: self.prompts[cloud][part],
            scale: part_scale(labels, part).expect("part in range"),
            scale_present: true,
        }
    }
}

/// Draws one target part uniformly; the prompt is the part's point farthest
/// from the other parts and the scale is the part's point fraction.
pub fn sample_target_part<R: Rng>(cloud: &AnnotatedCloud, rng: &mut R) -> Result<TrainSample> {
    Ok(TargetSampler::new(std::slice::from_ref(cloud))?.sample(0, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderTrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub p_drop: f64,
    pub loss: SegLossConfig,
    /// Points per training sample (prompt included); the decoder attends over
    /// all of them.
    pub points: usize,
    pub weight_decay: f32,
    pub seed: u64,
    /// Worker threads for the batch; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 40,
            batch: 8,
            p_drop: DEFAULT_SCALE_DROPOUT,
            loss: SegLossConfig::default(),
            points: 256,
            weight_decay: 0.01,
            seed: 0,
            threads: 0,
        }
    }
}

/// Batch means of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    pub pi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoderTrainReport {
    pub steps: Vec<DecoderStep>,
    pub epoch_means: Vec<f64>,
}

/// A sample with its point subset already drawn; evaluation is pure.
struct Planned {
    cloud: usize,
    sample: TrainSample,
    scale: Option<f32>,
    /// Subset of point indices, prompt first.
    subset: Vec<usize>,
}

fn plan<R: Rng>(sampler: &TargetSampler<'_>, cloud: usize, points: usize, p_drop: f64, rng: &mut R) -> Planned {
    let sample = sampler.sample(cloud, rng);
    let scale = scale_dropout(sample.scale, p_drop, rng);
    let n = sampler.clouds[cloud].len();
    let m = points.min(n).max(1);
    let mut others: Vec<usize> = index::sample(rng, n - 1, m - 1)
        .into_iter()
        .map(|j| if j >= sample.prompt { j + 1 } else { j })
        .collect();
    others.sort_unstable();
    let mut subset = Vec::with_capacity(m);
    subset.push(sample.prompt);
    subset.extend(others);
    Planned { cloud, sample, scale, subset }
}

struct Frozen<'a> {
    encoder: &'a Encoder,
    store: &'a ParameterStore,
}

fn evaluate(
    decoder: &Decoder,
    store: &ParameterStore,
    frozen: &Frozen<'_>,
    clouds: &[AnnotatedCloud],
    p: &Planned,
    loss_cfg: &SegLossConfig,
    grads: Option<&mut Gradients>,
) -> Result<SegLoss> {
    let cloud = &clouds[p.cloud];
    let (field, _) = frozen.encoder.build_triplane(frozen.store, &cloud.points)?;
    let pts: Vec<Point3> = p.subset.iter().map(|&i| cloud.points.get(i)).collect();
    let feats = sample_point_features(&field, &pts).features;
    let mask: Vec<bool> = p.subset.iter().map(|&i| p.sample.mask[i]).collect();
    let all: Vec<usize> = (0..pts.len()).collect();
    let (probs, cache) = decoder.forward(store, &feats, &pts, 0, p.scale, Some(&all))?;
    let loss = seg_loss(&probs, &mask, loss_cfg)?;
    if let Some(g) = grads {
        decoder.backward(store, &cache, &loss.grad, g);
    }
    Ok(loss)
}

fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Decoder-only training against a frozen encoder. Per step: draw a target
/// part per cloud of the batch, drop its scale with probability `p_drop`,
/// encode (no encoder gradient), decode, score with the segmentation loss,
/// average the per-sample gradients in batch order and take one AdamW step.
///
/// On a non-finite loss or gradient the store keeps its last good state and
/// [`Error::Diverged`] is returned.
pub fn train_decoder(
    decoder: &Decoder,
    store: &mut ParameterStore,
    encoder: &Encoder,
    encoder_store: &ParameterStore,
    clouds: &[AnnotatedCloud],
    cfg: &DecoderTrainConfig,
    mut on_step: impl FnMut(&DecoderStep),
) -> Result<DecoderTrainReport> {
    if clouds.is_empty() {
        return Err(validation("decoder training needs at least one cloud"));
    }
    if encoder.cfg.dim != decoder.cfg.dim {
        return Err(Error::Shape(format!("encoder width {} vs decoder width {}", encoder.cfg.dim, decoder.cfg.dim)));
    }
    let sampler = TargetSampler::new(clouds)?;
    let frozen = Frozen { encoder, store: encoder_store };
    let opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let threads = thread_count(cfg.threads);
    let batch = cfg.batch.max(1);
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    let mut report = DecoderTrainReport::default();
    let mut grads = Gradients::zeros_like(store);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(batch) {
            let planned: Vec<Planned> = chunk.iter().map(|&c| plan(&sampler, c, cfg.points, cfg.p_drop, &mut rng)).collect();
            let results = run_batch(decoder, store, &frozen, clouds, &planned, &cfg.loss, threads)?;
            grads.zero();
            let mut mean = DecoderStep { step, epoch, loss: 0.0, bce: 0.0, dice: 0.0, pi: 0.0 };
            for (g, l) in &results {
                grads.add_assign(g);
                mean.loss += l.loss;
                mean.bce += l.bce;
                mean.dice += l.dice;
                mean.pi += l.pi;
            }
            let k = results.len() as f64;
            mean.loss /= k;
            mean.bce /= k;
            mean.dice /= k;
            mean.pi /= k;
            if !mean.loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {step}: loss {}", mean.loss)));
            }
            grads.scale(1.0 / results.len() as f32);
            opt.step(store, &grads).map_err(|e| Error::Diverged(format!("epoch {epoch}, step {step}: {e}")))?;
            epoch_sum += mean.loss * k;
            on_step(&mean);
            report.steps.push(mean);
            step += 1;
        }
        let m = epoch_sum / clouds.len() as f64;
        log::info!("decoder epoch {epoch}: mean segmentation loss {m:.4}");
        report.epoch_means.push(m);
    }
    Ok(report)
}

/// Per-sample gradients and losses, in batch order.
fn run_batch(
    decoder: &Decoder,
    store: &ParameterStore,
    frozen: &Frozen<'_>,
    clouds: &[AnnotatedCloud],
    planned: &[Planned],
    loss_cfg: &SegLossConfig,
    threads: usize,
) -> Result<Vec<(Gradients, SegLoss)>> {
    let one = |p: &Planned| -> Result<(Gradients, SegLoss)> {
        let mut g = Gradients::zeros_like(store);
        let l = evaluate(decoder, store, frozen, clouds, p, loss_cfg, Some(&mut g))?;
        Ok((g, l))
    };
    if threads <= 1 || planned.len() <= 1 {
        return planned.iter().map(one).collect();
    }
    let per = planned.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = planned.chunks(per).map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(planned.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}

/// Mean segmentation loss on a fixed, seed-determined set of targets (one
/// per cloud, scale always present).
pub fn validation_loss(
    decoder: &Decoder,
    store: &ParameterStore,
    encoder: &Encoder,
    encoder_store: &ParameterStore,
    clouds: &[AnnotatedCloud],
    cfg: &DecoderTrainConfig,
    seed: u64,
) -> Result<f64> {
    let sampler = TargetSampler::new(clouds)?;
    let frozen = Frozen { encoder, store: encoder_store };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for c in 0..clouds.len() {
        let p = plan(&sampler, c, cfg.points, 0.0, &mut rng);
        sum += evaluate(decoder, store, &frozen, clouds, &p, &cfg.loss, None)?.loss;
    }
    Ok(sum / clouds.len() as f64)
}
