use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geometry::PartLabelMap;

/// `|A n B| / |A u B|`; two empty masks count as identical (1.0).
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(validation(format!("iou of masks with {} and {} points", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each GT part against the mask prompted from it.
    Interactive,
    /// Each GT part against the resolved label of its prompt.
    PromptedCorrespondence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartIoU {
    pub part: usize,
    pub iou: f64,
    /// Both masks empty; scored 1 by convention.
    pub empty_union: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectIoU {
    pub id: u64,
    pub miou: f64,
    pub parts: Vec<PartIoU>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub protocol: Protocol,
    pub dataset_miou: f64,
    pub per_object: Vec<ObjectIoU>,
}

/// Per-object score: predicted mask `k` is compared with GT part `k`.
pub fn object_iou(id: u64, predicted: &[Vec<bool>], gt: &PartLabelMap) -> Result<ObjectIoU> {
    if predicted.len() != gt.part_count() {
        return Err(validation(format!("{} predicted masks for {} parts", predicted.len(), gt.part_count())));
    }
    let mut parts = Vec::with_capacity(predicted.len());
    for (k, pred) in predicted.iter().enumerate() {
        let truth = gt.mask(k);
        let empty_union = !pred.iter().zip(&truth).any(|(a, b)| *a || *b);
        parts.push(PartIoU { part: k, iou: iou(pred, &truth)?, empty_union });
    }
    let miou = parts.iter().map(|p| p.iou).sum::<f64>() / parts.len() as f64;
    Ok(ObjectIoU { id, miou, parts })
}

/// Masks of a partition, one per label `0..k`.
pub fn label_masks(labels: &[u32], k: usize) -> Vec<Vec<bool>> {
    (0..k).map(|c| labels.iter().map(|&l| l as usize == c).collect()).collect()
}

/// Dataset score: mean of the per-object means.
pub fn mean_iou(protocol: Protocol, per_object: Vec<ObjectIoU>) -> IoUReport {
    let dataset_miou = if per_object.is_empty() {
        0.0
    } else {
        per_object.iter().map(|o| o.miou).sum::<f64>() / per_object.len() as f64
    };
    IoUReport { protocol, dataset_miou, per_object }
}
