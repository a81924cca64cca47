//! Dice and dynamically weighted BCE, with gradients w.r.t. the predicted
//! probabilities. All reductions run in binary64.

use crate::error::{validation, Result};
use crate::nn::ops::clamp_prob;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossConfig {
    pub lambda_bce: f32,
    pub lambda_dice: f32,
    pub eps: f64,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        Self { lambda_bce: 0.7, lambda_dice: 0.3, eps: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// `dL / d m_hat`.
    pub grad: Vec<f32>,
}

fn check(pred: &[f32], mask: &[bool]) -> Result<usize> {
    if pred.len() != mask.len() || pred.is_empty() {
        return Err(validation(format!("prediction of {} points vs mask of {}", pred.len(), mask.len())));
    }
    let pos = mask.iter().filter(|&&m| m).count();
    if pos == 0 {
        return Err(validation("target mask has no positive point"));
    }
    Ok(pos)
}

/// `1 - 2 m_hat.m / (|m_hat|_1 + |m|_1 + eps)`; `m` is treated as constant.
pub fn dice_term(pred: &[f32], mask: &[bool], eps: f64) -> Result<LossValue> {
    let pos = check(pred, mask)?;
    let mut inter = 0.0f64;
    let mut sum_p = 0.0f64;
    for (&p, &m) in pred.iter().zip(mask) {
        sum_p += p as f64;
        if m {
            inter += p as f64;
        }
    }
    let den = sum_p + pos as f64 + eps;
    let loss = 1.0 - 2.0 * inter / den;
    let grad = mask.iter().map(|&m| ((-2.0 * (m as u8 as f64) * den + 2.0 * inter) / (den * den)) as f32).collect();
    Ok(LossValue { loss, grad })
}

/// Positive-class weight `(1 - pi) / (pi + eps)`.
pub fn bce_weight(pi: f64, eps: f64) -> f64 {
    (1.0 - pi) / (pi + eps)
}

/// `-(1/N) (beta sum_{m=1} log p + sum_{m=0} log(1 - p))` with
/// probabilities clamped to `[1e-7, 1 - 1e-7]` first.
pub fn bce_dyn(pred: &[f32], mask: &[bool], eps: f64) -> Result<LossValue> {
    let pos = check(pred, mask)?;
    let n = pred.len() as f64;
    let beta = bce_weight(pos as f64 / n, eps);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &m) in pred.iter().zip(mask) {
        let p = clamp_prob(p) as f64;
        if m {
            total -= beta * p.ln();
            grad.push((-beta / (n * p)) as f32);
        } else {
            total -= (1.0 - p).ln();
            grad.push((1.0 / (n * (1.0 - p))) as f32);
        }
    }
    Ok(LossValue { loss: total / n, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegLoss {
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    /// Positive ratio of the target mask.
    pub pi: f64,
    pub grad: Vec<f32>,
}

/// `lambda_bce * bce_dyn + lambda_dice * dice_term`.
pub fn seg_loss(pred: &[f32], mask: &[bool], cfg: &SegLossConfig) -> Result<SegLoss> {
    if cfg.lambda_bce < 0.0 || cfg.lambda_dice < 0.0 {
        return Err(validation("loss weights must be non-negative"));
    }
    let b = bce_dyn(pred, mask, cfg.eps)?;
    let d = dice_term(pred, mask, cfg.eps)?;
    let (wb, wd) = (cfg.lambda_bce as f64, cfg.lambda_dice as f64);
    let grad = b.grad.iter().zip(&d.grad).map(|(&x, &y)| (wb * x as f64 + wd * y as f64) as f32).collect();
    let pi = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    Ok(SegLoss { loss: wb * b.loss + wd * d.loss, bce: b.loss, dice: d.loss, pi, grad })
}
