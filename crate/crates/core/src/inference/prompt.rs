use crate::error::{validation, Result};
use crate::geometry::{dist2, PartLabelMap, PointSet};

fn check_part(labels: &PartLabelMap, part: usize) -> Result<()> {
    if part >= labels.part_count() {
        return Err(validation(format!("part {part} out of range ({} parts)", labels.part_count())));
    }
    Ok(())
}

/// Point-count fraction `|part| / N`.
pub fn part_scale(labels: &PartLabelMap, part: usize) -> Result<f32> {
    check_part(labels, part)?;
    let size = labels.labels().iter().filter(|&&l| l as usize == part).count();
    Ok((size as f64 / labels.len() as f64) as f32)
}

/// The part's point farthest from every other part: maximises the distance
/// to the nearest point carrying a different label (ties to the lower
/// index). A cloud with a single part returns the point nearest its
/// centroid.
pub fn select_prompt_point(labels: &PartLabelMap, part: usize, points: &PointSet) -> Result<usize> {
    check_part(labels, part)?;
    if labels.len() != points.len() {
        return Err(validation("labels and points differ in length"));
    }
    Ok(prompt_points(labels, points)[part])
}

/// [`select_prompt_point`] for every part with one shared distance pass.
pub fn prompt_points(labels: &PartLabelMap, points: &PointSet) -> Vec<usize> {
    let coords = points.coords();
    let l = labels.labels();
    let k = labels.part_count();
    if k == 1 {
        let n = coords.len() as f64;
        let c: [f32; 3] = std::array::from_fn(|a| (coords.iter().map(|p| p[a] as f64).sum::<f64>() / n) as f32);
        let best = (0..coords.len()).fold(0, |b, i| if dist2(&coords[i], &c) < dist2(&coords[b], &c) { i } else { b });
        return vec![best];
    }
    let mut best: Vec<Option<(f64, usize)>> = vec![None; k];
    for (i, p) in coords.iter().enumerate() {
        let d = coords
            .iter()
            .zip(l)
            .filter(|&(_, &lj)| lj != l[i])
            .map(|(q, _)| dist2(p, q))
            .fold(f64::INFINITY, f64::min);
        let slot = &mut best[l[i] as usize];
        if slot.is_none_or(|(bd, _)| d > bd) {
            *slot = Some((d, i));
        }
    }
    best.into_iter().map(|b| b.expect("every part owns a point").1).collect()
}
