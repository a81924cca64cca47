//! Full segmentation: one prompted mask per part, overlap resolution by a
//! confidence/distance score, then k-NN majority propagation into the gaps.

use crate::error::{validation, Result};
use crate::geometry::{dist, dist2, knn, NeighborGraph, Point3, PointSet};

pub const DEFAULT_ALPHA_CONF: f32 = 0.5;
pub const DEFAULT_PROPAGATION_K: usize = 8;
pub const DEFAULT_PROPAGATION_ROUNDS: usize = 5;
pub const UNASSIGNED: i32 = -1;

/// Assigns every covered point to one mask.
///
/// A point inside several masks goes to the mask maximising
/// `alpha * p_ik + (1 - alpha) * exp(-|x_i - mu_k|)`, where `mu_k` is the mask
/// centroid; ties go to the lower mask index. Uncovered points get
/// [`UNASSIGNED`].
pub fn resolve_overlaps(masks: &[Vec<bool>], confidences: &[Vec<f32>], points: &[Point3], alpha: f32) -> Result<Vec<i32>> {
    if masks.is_empty() {
        return Err(validation("overlap resolution needs at least one mask"));
    }
    let n = points.len();
    if masks.len() != confidences.len() || masks.iter().any(|m| m.len() != n) || confidences.iter().any(|c| c.len() != n) {
        return Err(validation("masks, confidences and points must agree in size"));
    }
    let centers: Vec<Option<Point3>> = masks
        .iter()
        .map(|m| {
            let mut s = [0.0f64; 3];
            let mut c = 0usize;
            for (p, _) in points.iter().zip(m).filter(|(_, &b)| b) {
                (0..3).for_each(|a| s[a] += p[a] as f64);
                c += 1;
            }
            (c > 0).then(|| s.map(|v| (v / c as f64) as f32))
        })
        .collect();
    let alpha = alpha as f64;
    let mut out = vec![UNASSIGNED; n];
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        let covering = masks.iter().enumerate().filter(|(_, m)| m[i]);
        let count = covering.clone().count();
        for (k, _) in covering {
            if count == 1 {
                best = Some((0.0, k));
                break;
            }
            let mu = centers[k].expect("a covering mask is non-empty");
            let score = alpha * confidences[k][i] as f64 + (1.0 - alpha) * (-dist(&points[i], &mu)).exp();
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, k));
            }
        }
        if let Some((_, k)) = best {
            out[i] = k as i32;
        }
    }
    Ok(out)
}

/// One synchronous majority-vote round; returns the number of newly
/// assigned points.
fn propagate_round(assignment: &mut [i32], graph: &NeighborGraph) -> usize {
    let prev = assignment.to_vec();
    let mut changed = 0;
    let mut votes: Vec<(i32, usize)> = Vec::new();
    for (i, slot) in assignment.iter_mut().enumerate() {
        if prev[i] != UNASSIGNED {
            continue;
        }
        votes.clear();
        for &j in graph.neighbors(i) {
            let l = prev[j];
            if l == UNASSIGNED {
                continue;
            }
            match votes.iter_mut().find(|(v, _)| *v == l) {
                Some((_, c)) => *c += 1,
                None => votes.push((l, 1)),
            }
        }
        // Highest count, then smallest label.
        if let Some(&(l, _)) = votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) {
            *slot = l;
            changed += 1;
        }
    }
    changed
}

/// `rounds` synchronous majority-vote rounds over the k-NN graph, then every
/// point still unassigned copies the label of its nearest assigned point
/// (ties to the lower index). Assigned points never change.
pub fn knn_propagate(assignment: &[i32], graph: &NeighborGraph, points: &[Point3], rounds: usize) -> Result<Vec<u32>> {
    Ok(knn_propagate_traced(assignment, graph, points, rounds)?.0)
}

/// [`knn_propagate`] that also reports how many points the final
/// nearest-assigned fallback had to fill.
pub fn knn_propagate_traced(
    assignment: &[i32],
    graph: &NeighborGraph,
    points: &[Point3],
    rounds: usize,
) -> Result<(Vec<u32>, usize)> {
    let n = assignment.len();
    if graph.len() != n || points.len() != n {
        return Err(validation("graph, points and assignment must describe the same cloud"));
    }
    if assignment.iter().all(|&a| a == UNASSIGNED) {
        return Err(validation("propagation needs at least one assigned point"));
    }
    let mut a = assignment.to_vec();
    for _ in 0..rounds {
        if propagate_round(&mut a, graph) == 0 {
            break;
        }
    }
    let assigned: Vec<usize> = (0..n).filter(|&i| a[i] != UNASSIGNED).collect();
    let mut fallback = 0;
    let snapshot = a.clone();
    for i in 0..n {
        if snapshot[i] == UNASSIGNED {
            let mut best = assigned[0];
            let mut bd = dist2(&points[i], &points[best]);
            for &j in &assigned[1..] {
                let d = dist2(&points[i], &points[j]);
                if d < bd {
                    best = j;
                    bd = d;
                }
            }
            a[i] = snapshot[best];
            fallback += 1;
        }
    }
    Ok((a.into_iter().map(|v| v as u32).collect(), fallback))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullSegConfig {
    pub theta: f32,
    pub alpha_conf: f32,
    pub k: usize,
    pub rounds: usize,
}

impl Default for FullSegConfig {
    fn default() -> Self {
        Self {
            theta: super::DEFAULT_THETA,
            alpha_conf: DEFAULT_ALPHA_CONF,
            k: DEFAULT_PROPAGATION_K,
            rounds: DEFAULT_PROPAGATION_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSegResult {
    /// Final label per point; label `k` is the mask of prompt `k`.
    pub labels: Vec<u32>,
    pub masks: Vec<Vec<bool>>,
    pub confidences: Vec<Vec<f32>>,
    /// Points the propagation's nearest-assigned fallback filled.
    pub fallback_points: usize,
    /// True when no mask covered any point and labels were taken from the
    /// most confident prediction instead.
    pub uncovered: bool,
}

/// Post-processing of per-prompt probabilities into a partition.
pub fn full_segment_from_predictions(points: &PointSet, confidences: Vec<Vec<f32>>, cfg: &FullSegConfig) -> Result<FullSegResult> {
    if confidences.is_empty() {
        return Err(validation("full segmentation needs at least one prompt"));
    }
    let coords = points.coords();
    let masks: Vec<Vec<bool>> = confidences.iter().map(|c| c.iter().map(|&p| p >= cfg.theta).collect()).collect();
    let assignment = resolve_overlaps(&masks, &confidences, coords, cfg.alpha_conf)?;
    if assignment.iter().all(|&a| a == UNASSIGNED) {
        let labels = (0..coords.len())
            .map(|i| {
                (0..confidences.len()).fold(0usize, |b, k| if confidences[k][i] > confidences[b][i] { k } else { b }) as u32
            })
            .collect();
        return Ok(FullSegResult { labels, masks, confidences, fallback_points: 0, uncovered: true });
    }
    let (labels, fallback_points) = if assignment.iter().any(|&a| a == UNASSIGNED) {
        let k = cfg.k.min(coords.len().saturating_sub(1));
        if k == 0 {
            // Single point: it is assigned, so nothing to propagate.
            (assignment.iter().map(|&a| a as u32).collect(), 0)
        } else {
            let graph = knn(points, k)?;
            knn_propagate_traced(&assignment, &graph, coords, cfg.rounds)?
        }
    } else {
        (assignment.iter().map(|&a| a as u32).collect(), 0)
    };
    Ok(FullSegResult { labels, masks, confidences, fallback_points, uncovered: false })
}
