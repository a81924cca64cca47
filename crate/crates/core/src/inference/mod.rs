//! Interactive and full segmentation, evaluation protocols and the
//! scale-perturbation sweep.

mod fullseg;
mod metrics;
mod prompt;

use serde::{Deserialize, Serialize};

pub use fullseg::{
    full_segment_from_predictions, knn_propagate, knn_propagate_traced, resolve_overlaps, FullSegConfig, FullSegResult,
    DEFAULT_ALPHA_CONF, DEFAULT_PROPAGATION_K, DEFAULT_PROPAGATION_ROUNDS, UNASSIGNED,
};
pub use metrics::{iou, label_masks, mean_iou, object_iou, IoUReport, ObjectIoU, PartIoU, Protocol};
pub use prompt::{part_scale, prompt_points, select_prompt_point};

use crate::data::AnnotatedCloud;
use crate::decoder::{clamp_scale, PromptQuery};
use crate::error::{validation, Result};
use crate::geometry::{PartLabelMap, PointSet};
use crate::model::SegModel;
use crate::nn::Tensor;

pub const DEFAULT_THETA: f32 = 0.7;
pub const SWEEP_DELTAS: [f32; 10] = [0.0, -0.1, 0.1, -0.2, 0.2, -0.3, 0.3, -0.5, 0.5, 1.0];
pub const SWEEP_DELTA_MAX: f32 = 3.0;

/// All sweep offsets, `SWEEP_DELTAS` followed by the extreme `+3`.
pub fn sweep_deltas() -> Vec<f32> {
    let mut d = SWEEP_DELTAS.to_vec();
    d.push(SWEEP_DELTA_MAX);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPrediction {
    pub probabilities: Vec<f32>,
    pub threshold: f32,
    pub mask: Vec<bool>,
    /// Fraction of points in the mask.
    pub pi: f64,
}

impl MaskPrediction {
    pub fn from_probabilities(probabilities: Vec<f32>, threshold: f32) -> Self {
        let mask: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
        let pi = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
        Self { probabilities, threshold, mask, pi }
    }
}

/// One prompt against precomputed encoder features.
pub fn segment_with_features(
    model: &SegModel,
    features: &Tensor,
    points: &PointSet,
    prompt: PromptQuery,
    theta: f32,
) -> Result<MaskPrediction> {
    let scale = prompt.scale.map(clamp_scale);
    let probs = model.decode(features, points, prompt.index, scale)?;
    Ok(MaskPrediction::from_probabilities(probs, theta))
}

/// Encoder pass, decoder pass, threshold.
pub fn interactive_segment(model: &SegModel, points: &PointSet, prompt: PromptQuery, theta: f32) -> Result<MaskPrediction> {
    if prompt.index >= points.len() {
        return Err(crate::Error::InvalidPrompt(format!("prompt index {} out of range for {} points", prompt.index, points.len())));
    }
    let features = model.features(points)?;
    segment_with_features(model, &features, points, prompt, theta)
}

/// One prompt per ground-truth part, at the part's interior-most point and,
/// when `with_scale`, with the part's point fraction as scale.
pub fn gt_prompts(labels: &PartLabelMap, points: &PointSet, with_scale: bool) -> Result<Vec<PromptQuery>> {
    let idx = prompt_points(labels, points);
    idx.into_iter()
        .enumerate()
        .map(|(k, i)| Ok(PromptQuery::new(i, if with_scale { Some(part_scale(labels, k)?) } else { None })))
        .collect()
}

/// Runs every prompt, then resolves overlaps and propagates labels.
pub fn full_segment(model: &SegModel, points: &PointSet, prompts: &[PromptQuery], cfg: &FullSegConfig) -> Result<FullSegResult> {
    if prompts.is_empty() {
        return Err(validation("full segmentation needs at least one prompt"));
    }
    let features = model.features(points)?;
    let confidences = prompts
        .iter()
        .map(|p| Ok(segment_with_features(model, &features, points, *p, cfg.theta)?.probabilities))
        .collect::<Result<Vec<_>>>()?;
    full_segment_from_predictions(points, confidences, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Interactive,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub with_scale: bool,
    pub theta: f32,
    pub alpha_conf: f32,
    pub k: usize,
    pub rounds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Interactive,
            with_scale: false,
            theta: DEFAULT_THETA,
            alpha_conf: DEFAULT_ALPHA_CONF,
            k: DEFAULT_PROPAGATION_K,
            rounds: DEFAULT_PROPAGATION_ROUNDS,
        }
    }
}

impl EvalConfig {
    pub fn full_seg(&self) -> FullSegConfig {
        FullSegConfig { theta: self.theta, alpha_conf: self.alpha_conf, k: self.k, rounds: self.rounds }
    }
}

/// The JSON report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_miou: f64,
    pub per_object: Vec<ObjectIoU>,
    pub protocol: Protocol,
    pub config: EvalConfig,
}

/// A labelled cloud with its encoder features and ground-truth prompts, so
/// several protocols can share one encoder pass.
pub struct PreparedCloud<'a> {
    pub cloud: &'a AnnotatedCloud,
    pub labels: &'a PartLabelMap,
    pub features: Tensor,
    pub prompts: Vec<usize>,
    pub scales: Vec<f32>,
}

impl<'a> PreparedCloud<'a> {
    pub fn new(model: &SegModel, cloud: &'a AnnotatedCloud) -> Result<Self> {
        let labels = cloud.labels.as_ref().ok_or_else(|| validation(format!("cloud {} has no labels", cloud.id)))?;
        let prompts = prompt_points(labels, &cloud.points);
        let scales = (0..labels.part_count()).map(|k| part_scale(labels, k)).collect::<Result<Vec<_>>>()?;
        Ok(Self { cloud, labels, features: model.features(&cloud.points)?, prompts, scales })
    }

    /// Probabilities for every part's prompt; `scale_of(k)` picks the scale.
    pub fn predict(&self, model: &SegModel, scale_of: impl Fn(usize, f32) -> Option<f32>) -> Result<Vec<Vec<f32>>> {
        (0..self.prompts.len())
            .map(|k| model.decode(&self.features, &self.cloud.points, self.prompts[k], scale_of(k, self.scales[k]).map(clamp_scale)))
            .collect()
    }

    pub fn interactive_score(&self, predictions: &[Vec<f32>], theta: f32) -> Result<ObjectIoU> {
        let masks: Vec<Vec<bool>> = predictions.iter().map(|p| p.iter().map(|&v| v >= theta).collect()).collect();
        object_iou(self.cloud.id, &masks, self.labels)
    }

    pub fn full_score(&self, predictions: Vec<Vec<f32>>, cfg: &FullSegConfig) -> Result<ObjectIoU> {
        let k = predictions.len();
        let res = full_segment_from_predictions(&self.cloud.points, predictions, cfg)?;
        object_iou(self.cloud.id, &label_masks(&res.labels, k), self.labels)
    }
}

/// Evaluates one protocol over a labelled dataset.
pub fn evaluate(model: &SegModel, clouds: &[AnnotatedCloud], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut objects = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let prep = PreparedCloud::new(model, cloud)?;
        let preds = prep.predict(model, |_, s| cfg.with_scale.then_some(s))?;
        objects.push(match cfg.mode {
            EvalMode::Interactive => prep.interactive_score(&preds, cfg.theta)?,
            EvalMode::Full => prep.full_score(preds, &cfg.full_seg())?,
        });
    }
    let protocol = match cfg.mode {
        EvalMode::Interactive => Protocol::Interactive,
        EvalMode::Full => Protocol::PromptedCorrespondence,
    };
    let r = mean_iou(protocol, objects);
    Ok(EvalReport { dataset_miou: r.dataset_miou, per_object: r.per_object, protocol, config: *cfg })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f32,
    pub miou: f64,
    /// `miou(delta) - miou(0)`.
    pub delta_iou: f64,
}

/// `s' = clamp((1 + delta) s, 0, 1)` for the scale of every prompted part.
pub fn perturbed_scale(s: f32, delta: f32) -> f32 {
    ((1.0 + delta) * s).clamp(0.0, 1.0)
}

fn sweep_rows(deltas: &[f32], mious: Vec<f64>) -> Vec<SweepRow> {
    let base = deltas.iter().position(|&d| d == 0.0).map(|i| mious[i]).unwrap_or(f64::NAN);
    deltas.iter().zip(mious).map(|(&delta, miou)| SweepRow { delta, miou, delta_iou: miou - base }).collect()
}

/// Interactive mean IoU with perturbed scale prompts, per `delta`.
pub fn scale_perturbation_sweep(model: &SegModel, clouds: &[AnnotatedCloud], deltas: &[f32], theta: f32) -> Result<Vec<SweepRow>> {
    let mut sums = vec![0.0f64; deltas.len()];
    for cloud in clouds {
        let prep = PreparedCloud::new(model, cloud)?;
        for (j, &d) in deltas.iter().enumerate() {
            let preds = prep.predict(model, |_, s| Some(perturbed_scale(s, d)))?;
            sums[j] += prep.interactive_score(&preds, theta)?.miou;
        }
    }
    let n = clouds.len().max(1) as f64;
    Ok(sweep_rows(deltas, sums.into_iter().map(|s| s / n).collect()))
}

/// Every evaluation protocol from one pass over the data: interactive with
/// and without scale, full segmentation with and without scale, and the
/// scale sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub interactive_no_scale: IoUReport,
    pub interactive_scale: IoUReport,
    pub full_no_scale: IoUReport,
    pub full_scale: IoUReport,
    pub sweep: Vec<SweepRow>,
    pub theta: f32,
}

pub fn benchmark(model: &SegModel, clouds: &[AnnotatedCloud], cfg: &EvalConfig, deltas: &[f32]) -> Result<BenchmarkReport> {
    let full = cfg.full_seg();
    let (mut ins, mut is, mut fns, mut fs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut sums = vec![0.0f64; deltas.len()];
    for (c, cloud) in clouds.iter().enumerate() {
        let prep = PreparedCloud::new(model, cloud)?;
        let no_scale = prep.predict(model, |_, _| None)?;
        let with_scale = prep.predict(model, |_, s| Some(s))?;
        ins.push(prep.interactive_score(&no_scale, cfg.theta)?);
        is.push(prep.interactive_score(&with_scale, cfg.theta)?);
        fns.push(prep.full_score(no_scale, &full)?);
        for (j, &d) in deltas.iter().enumerate() {
            sums[j] += if d == 0.0 {
                is.last().expect("pushed above").miou
            } else {
                prep.interactive_score(&prep.predict(model, |_, s| Some(perturbed_scale(s, d)))?, cfg.theta)?.miou
            };
        }
        fs.push(prep.full_score(with_scale, &full)?);
        if (c + 1) % 20 == 0 {
            log::info!("benchmark: {}/{} clouds", c + 1, clouds.len());
        }
    }
    let n = clouds.len().max(1) as f64;
    Ok(BenchmarkReport {
        interactive_no_scale: mean_iou(Protocol::Interactive, ins),
        interactive_scale: mean_iou(Protocol::Interactive, is),
        full_no_scale: mean_iou(Protocol::PromptedCorrespondence, fns),
        full_scale: mean_iou(Protocol::PromptedCorrespondence, fs),
        sweep: sweep_rows(deltas, sums.into_iter().map(|s| s / n).collect()),
        theta: cfg.theta,
    })
}
