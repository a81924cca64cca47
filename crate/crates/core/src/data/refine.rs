use super::{AnnotatedCloud, Stage};
use crate::error::{validation, Result};
use crate::geometry::{aabb_of, dbscan, dist2, PartLabelMap, NOISE};

pub const DEFAULT_EPS_FACTOR: f32 = 0.15;
pub const DEFAULT_MIN_PTS: usize = 5;
pub const DEFAULT_MIN_PARTS: usize = 2;
pub const DEFAULT_MAX_PARTS: usize = 50;

/// Splits every label whose points form several density clusters.
///
/// Per label, DBSCAN runs with `eps = eps_factor * diagonal(aabb(label))`.
/// With more than one cluster each cluster becomes its own label; noise
/// points join the cluster of their nearest clustered point. A split label
/// has a smaller bounding box and hence a smaller radius, so passes repeat
/// until nothing splits. New ids are assigned in (original label, cluster)
/// order, so a cloud with nothing to split keeps its labels exactly.
pub fn connectivity_refine(cloud: &AnnotatedCloud, eps_factor: f32, min_pts: usize) -> Result<AnnotatedCloud> {
    let mut labels = cloud.labels.clone().ok_or_else(|| validation("connectivity refinement needs labels"))?;
    if !(eps_factor > 0.0) {
        return Err(validation("eps factor must be positive"));
    }
    loop {
        let next = refine_pass(cloud, &labels, eps_factor, min_pts)?;
        if next.part_count() == labels.part_count() {
            break;
        }
        log::debug!("cloud {}: refinement split {} labels into {}", cloud.id, labels.part_count(), next.part_count());
        labels = next;
    }
    Ok(AnnotatedCloud { id: cloud.id, points: cloud.points.clone(), labels: Some(labels), stage: Stage::Refined })
}

fn refine_pass(cloud: &AnnotatedCloud, labels: &PartLabelMap, eps_factor: f32, min_pts: usize) -> Result<PartLabelMap> {
    let coords = cloud.points.coords();
    let mut new_labels = vec![0u32; coords.len()];
    let mut next = 0u32;
    for part in 0..labels.part_count() {
        let members = labels.members(part);
        let pts: Vec<_> = members.iter().map(|&i| coords[i]).collect();
        let diag = aabb_of(&pts).diagonal;
        let clusters = if members.len() > 1 && diag > 0.0 {
            dbscan(&pts, diag * eps_factor, min_pts)
        } else {
            vec![NOISE; members.len()]
        };
        let count = clusters.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as u32;
        if count <= 1 {
            for &i in &members {
                new_labels[i] = next;
            }
            next += 1;
            continue;
        }
        for (local, &i) in members.iter().enumerate() {
            let c = if clusters[local] != NOISE {
                clusters[local]
            } else {
                let nearest = (0..members.len())
                    .filter(|&j| clusters[j] != NOISE)
                    .min_by(|&a, &b| dist2(&pts[local], &pts[a]).total_cmp(&dist2(&pts[local], &pts[b])).then(a.cmp(&b)))
                    .expect("at least two clusters exist");
                clusters[nearest]
            };
            new_labels[i] = next + c as u32;
        }
        next += count;
    }
    PartLabelMap::new(new_labels, next as usize)
}

/// True iff the cloud carries between `min_parts` and `max_parts` labels.
pub fn part_count_filter(cloud: &AnnotatedCloud, min_parts: usize, max_parts: usize) -> bool {
    (min_parts..=max_parts).contains(&cloud.part_count())
}
