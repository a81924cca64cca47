//! Procedural stand-in for a large asset collection: each shape is a cluster
//! of randomly posed primitives, one part per primitive.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mesh::{LabeledMesh, Triangle};
use crate::error::{validation, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Box,
    Cylinder,
    Sphere,
    Torus,
}

impl Primitive {
    const ALL: [Primitive; 4] = [Primitive::Box, Primitive::Cylinder, Primitive::Sphere, Primitive::Torus];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub min_parts: usize,
    pub max_parts: usize,
    /// Range of primitive bounding radii.
    pub radius: (f64, f64),
    /// Range of the clearance between a new primitive's bounding sphere and
    /// its parent's.
    pub gap: (f64, f64),
    pub max_tries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { min_parts: 2, max_parts: 8, radius: (0.5, 1.0), gap: (0.02, 0.12), max_tries: 64 }
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: V3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn random_unit<R: Rng>(rng: &mut R) -> V3 {
    loop {
        let v: V3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Uniformly random rotation matrix from a normalised Gaussian quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [V3; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(m: &[V3; 3], v: V3) -> V3 {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Local-frame triangles of a primitive whose bounding radius is `r`.
fn primitive_triangles<R: Rng>(kind: Primitive, r: f64, rng: &mut R) -> Vec<[V3; 3]> {
    match kind {
        Primitive::Box => {
            let e: V3 = std::array::from_fn(|_| rng.random_range(0.35..1.0));
            let h = scale(e, r / norm(e));
            box_triangles(h)
        }
        Primitive::Cylinder => {
            let ratio: f64 = rng.random_range(0.5..2.0);
            let rho = r / (1.0 + ratio * ratio).sqrt();
            cylinder_triangles(rho, rho * ratio, 24)
        }
        Primitive::Sphere => sphere_triangles(r, 12, 24),
        Primitive::Torus => {
            let t_ratio: f64 = rng.random_range(0.35..0.6);
            let major = r / (1.0 + t_ratio);
            torus_triangles(major, major * t_ratio, 24, 12)
        }
    }
}

fn quad(out: &mut Vec<[V3; 3]>, a: V3, b: V3, c: V3, d: V3) {
    out.push([a, b, c]);
    out.push([a, c, d]);
}

fn box_triangles(h: V3) -> Vec<[V3; 3]> {
    let c = |sx: f64, sy: f64, sz: f64| [sx * h[0], sy * h[1], sz * h[2]];
    let mut t = Vec::with_capacity(12);
    quad(&mut t, c(-1., -1., -1.), c(1., -1., -1.), c(1., 1., -1.), c(-1., 1., -1.));
    quad(&mut t, c(-1., -1., 1.), c(1., -1., 1.), c(1., 1., 1.), c(-1., 1., 1.));
    quad(&mut t, c(-1., -1., -1.), c(1., -1., -1.), c(1., -1., 1.), c(-1., -1., 1.));
    quad(&mut t, c(-1., 1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(-1., 1., 1.));
    quad(&mut t, c(-1., -1., -1.), c(-1., 1., -1.), c(-1., 1., 1.), c(-1., -1., 1.));
    quad(&mut t, c(1., -1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(1., -1., 1.));
    t
}

fn cylinder_triangles(rho: f64, half_h: f64, seg: usize) -> Vec<[V3; 3]> {
    let ring = |i: usize, z: f64| {
        let a = 2.0 * PI * i as f64 / seg as f64;
        [rho * a.cos(), rho * a.sin(), z]
    };
    let mut t = Vec::with_capacity(seg * 4);
    for i in 0..seg {
        let j = (i + 1) % seg;
        quad(&mut t, ring(i, -half_h), ring(j, -half_h), ring(j, half_h), ring(i, half_h));
        t.push([[0.0, 0.0, -half_h], ring(j, -half_h), ring(i, -half_h)]);
        t.push([[0.0, 0.0, half_h], ring(i, half_h), ring(j, half_h)]);
    }
    t
}

fn sphere_triangles(r: f64, lat: usize, lon: usize) -> Vec<[V3; 3]> {
    let p = |i: usize, j: usize| {
        let th = PI * i as f64 / lat as f64;
        let ph = 2.0 * PI * j as f64 / lon as f64;
        [r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]
    };
    let mut t = Vec::with_capacity(lat * lon * 2);
    for i in 0..lat {
        for j in 0..lon {
            quad(&mut t, p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1));
        }
    }
    t
}

fn torus_triangles(major: f64, minor: f64, seg_u: usize, seg_v: usize) -> Vec<[V3; 3]> {
    let p = |i: usize, j: usize| {
        let u = 2.0 * PI * i as f64 / seg_u as f64;
        let v = 2.0 * PI * j as f64 / seg_v as f64;
        let rr = major + minor * v.cos();
        [rr * u.cos(), rr * u.sin(), minor * v.sin()]
    };
    let mut t = Vec::with_capacity(seg_u * seg_v * 2);
    for i in 0..seg_u {
        for j in 0..seg_v {
            quad(&mut t, p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1));
        }
    }
    t
}

/// Composes `K` primitives (K uniform in the configured range), each placed
/// next to an earlier one. Bounding spheres never intersect; placement is
/// retried up to `max_tries` times per primitive, after which the clearance
/// range is widened and sampling continues.
pub fn generate_synthetic_shape(seed: u64, cfg: &SynthConfig) -> Result<LabeledMesh> {
    if cfg.min_parts < 1 || cfg.min_parts > cfg.max_parts || cfg.max_parts > 50 {
        return Err(validation(format!("part range [{}, {}] outside [1, 50]", cfg.min_parts, cfg.max_parts)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(cfg.min_parts..=cfg.max_parts);
    let mut placed: Vec<(V3, f64)> = Vec::with_capacity(k);
    let mut triangles = Vec::new();
    for part in 0..k {
        let kind = Primitive::ALL[rng.random_range(0..Primitive::ALL.len())];
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let center = if placed.is_empty() {
            [0.0; 3]
        } else {
            let (mut lo, mut hi) = cfg.gap;
            let mut tries = 0;
            loop {
                let (pc, pr) = placed[rng.random_range(0..placed.len())];
                let gap = rng.random_range(lo..=hi);
                let c = add(pc, scale(random_unit(&mut rng), pr + r + gap));
                let clear = placed.iter().all(|&(oc, or)| {
                    norm(add(c, scale(oc, -1.0))) >= or + r + lo.min(gap) - 1e-9
                });
                if clear {
                    break c;
                }
                tries += 1;
                if tries % cfg.max_tries == 0 {
                    lo *= 2.0;
                    hi *= 2.0;
                }
            }
        };
        placed.push((center, r));
        let rot = random_rotation(&mut rng);
        for tri in primitive_triangles(kind, r, &mut rng) {
            let v = tri.map(|p| {
                let q = add(rotate(&rot, p), center);
                q.map(|c| c as f32) as Point3
            });
            triangles.push(Triangle { v, part: part as u32 });
        }
    }
    LabeledMesh::new(triangles)
}
