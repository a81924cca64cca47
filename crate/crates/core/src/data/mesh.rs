use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use super::{AnnotatedCloud, Stage};
use crate::error::{validation, Result};
use crate::geometry::{PartLabelMap, Point3, PointSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Point3; 3],
    pub part: u32,
}

impl Triangle {
    pub fn area(&self) -> f64 {
        let [a, b, c] = self.v.map(|p| p.map(|x| x as f64));
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
        0.5 * (cx[0] * cx[0] + cx[1] * cx[1] + cx[2] * cx[2]).sqrt()
    }
}

const MIN_AREA: f64 = 1e-12;

/// Triangle soup with one part id per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMesh {
    triangles: Vec<Triangle>,
    part_count: usize,
}

impl LabeledMesh {
    /// Drops degenerate triangles and renumbers part ids to `0..K` in order of
    /// first appearance.
    pub fn new(triangles: Vec<Triangle>) -> Result<Self> {
        if triangles.iter().flat_map(|t| t.v.iter().flatten()).any(|c| !c.is_finite()) {
            return Err(validation("mesh vertices must be finite"));
        }
        let mut kept: Vec<Triangle> = triangles.into_iter().filter(|t| t.area() > MIN_AREA).collect();
        if kept.is_empty() {
            return Err(validation("mesh has no triangle with positive area"));
        }
        let raw: Vec<u32> = kept.iter().map(|t| t.part).collect();
        let compact = PartLabelMap::compact(&raw);
        for (t, &l) in kept.iter_mut().zip(compact.labels()) {
            t.part = l;
        }
        Ok(Self { triangles: kept, part_count: compact.part_count() })
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(Triangle::area).sum()
    }

    pub fn part_areas(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.part_count];
        for t in &self.triangles {
            a[t.part as usize] += t.area();
        }
        a
    }
}

/// Draws `n` points uniformly over the surface: a triangle is chosen with
/// probability proportional to its area, then a barycentric-uniform point
/// inside it. Each point inherits the part id of its triangle. Coordinates
/// are returned as sampled (not normalised).
pub fn sample_surface_proportional(mesh: &LabeledMesh, n: usize, seed: u64) -> Result<AnnotatedCloud> {
    if n == 0 {
        return Err(validation("sample count must be positive"));
    }
    let areas: Vec<f64> = mesh.triangles.iter().map(Triangle::area).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| validation(format!("mesh areas: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let t = &mesh.triangles[pick.sample(&mut rng)];
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let [a, b, c] = t.v;
        let p: Point3 = std::array::from_fn(|k| {
            let (a, b, c) = (a[k] as f64, b[k] as f64, c[k] as f64);
            (a + u * (b - a) + v * (c - a)) as f32
        });
        coords.push(p);
        parts.push(t.part);
    }
    // Keep mesh part ids unless a tiny part received no sample.
    let labels = PartLabelMap::new(parts.clone(), mesh.part_count).unwrap_or_else(|_| PartLabelMap::compact(&parts));
    Ok(AnnotatedCloud {
        id: seed,
        points: PointSet::new(coords)?,
        labels: Some(labels),
        stage: Stage::Raw,
    })
}
