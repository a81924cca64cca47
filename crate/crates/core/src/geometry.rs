//! Deterministic geometric primitives shared by the rest of the crate.
//!
//! Everything here is exact brute force: the point clouds handled at desk
//! scale are a few thousand points, and every other module relies on these
//! routines being reproducible down to tie-breaking.

use std::collections::VecDeque;

use crate::error::{validation, Result};

pub type Point3 = [f32; 3];

/// A point cloud. Coordinates are unitless; most of the pipeline expects them
/// to live inside the unit sphere (see [`normalize_unit_sphere`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    coords: Vec<Point3>,
}

impl PointSet {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        if coords.is_empty() {
            return Err(validation("point set must contain at least one point"));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(validation("point coordinates must be finite"));
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> Point3 {
        self.coords[i]
    }

    /// Points at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<PointSet> {
        PointSet::new(indices.iter().map(|&i| self.coords[i]).collect())
    }

    pub fn into_coords(self) -> Vec<Point3> {
        self.coords
    }
}

/// Per-point part labels, compact in `[0, part_count)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLabelMap {
    labels: Vec<u32>,
    part_count: usize,
}

impl PartLabelMap {
    /// Validates that labels are compact: every label is below `part_count`
    /// and every part owns at least one point.
    pub fn new(labels: Vec<u32>, part_count: usize) -> Result<Self> {
        let mut seen = vec![false; part_count];
        for &l in &labels {
            let l = l as usize;
            if l >= part_count {
                return Err(validation(format!("label {l} out of range for {part_count} parts")));
            }
            seen[l] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(validation(format!("part {p} owns no points")));
        }
        Ok(Self { labels, part_count })
    }

    /// Renumbers arbitrary labels to `0..K` in order of first appearance.
    pub fn compact<T: Copy + Eq + std::hash::Hash>(raw: &[T]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|r| {
                let next = map.len() as u32;
                *map.entry(*r).or_insert(next)
            })
            .collect();
        Self { labels, part_count: map.len() }
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the points carrying `part`.
    pub fn members(&self, part: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == part)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn part_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.part_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Binary indicator of `part`.
    pub fn mask(&self, part: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == part).collect()
    }
}

/// Exact k-nearest-neighbour graph (row `i` holds the `k` neighbours of `i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
    pub diagonal: f32,
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// Centres the cloud on its centroid and scales it so the farthest point has
/// unit norm. A cloud of identical points maps to the origin.
pub fn normalize_unit_sphere(coords: &[Point3]) -> Result<PointSet> {
    if coords.is_empty() {
        return Err(validation("cannot normalize an empty point set"));
    }
    if coords.iter().flatten().any(|c| !c.is_finite()) {
        return Err(validation("point coordinates must be finite"));
    }
    let n = coords.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in coords {
        for a in 0..3 {
            centroid[a] += p[a] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centered: Vec<[f64; 3]> = coords
        .iter()
        .map(|p| [p[0] as f64 - centroid[0], p[1] as f64 - centroid[1], p[2] as f64 - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max_norm > 0.0 { 1.0 / max_norm } else { 0.0 };
    PointSet::new(
        centered
            .iter()
            .map(|c| [(c[0] * scale) as f32, (c[1] * scale) as f32, (c[2] * scale) as f32])
            .collect(),
    )
}

/// Exact Euclidean k-NN by full scan. Self is excluded; ties are broken by
/// the lower index.
pub fn knn(points: &PointSet, k: usize) -> Result<NeighborGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(validation(format!("k must satisfy 0 < k < N (k={k}, N={n})")));
    }
    let coords = points.coords();
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, p) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(coords.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| (dist2(p, q), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        indices.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { k, indices })
}

pub fn aabb(points: &PointSet) -> Aabb {
    aabb_of(points.coords())
}

/// Bounding box of a non-empty slice of points.
pub fn aabb_of(coords: &[Point3]) -> Aabb {
    let mut min = [f32::INFINITY; 3];
    let mut max = [f32::NEG_INFINITY; 3];
    for p in coords {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let diagonal = dist(&min, &max) as f32;
    Aabb { min, max, diagonal }
}

/// Label assigned by [`dbscan`] to points that belong to no cluster.
pub const NOISE: i32 = -1;

/// Density-based clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Clusters are seeded in index order and
/// expanded breadth-first, so the result only depends on point order.
pub fn dbscan(points: &[Point3], eps: f32, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let eps2 = (eps as f64) * (eps as f64);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist2(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();

    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if visited[seed] || !is_core[seed] {
            continue;
        }
        let cluster = next;
        next += 1;
        visited[seed] = true;
        labels[seed] = cluster;
        queue.push_back(seed);
        while let Some(q) = queue.pop_front() {
            for &r in &neighbors[q] {
                if labels[r] == NOISE {
                    labels[r] = cluster;
                }
                if !visited[r] && is_core[r] {
                    visited[r] = true;
                    labels[r] = cluster;
                    queue.push_back(r);
                }
            }
        }
    }
    labels
}
