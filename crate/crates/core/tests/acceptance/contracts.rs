use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partseg::data::{
    connectivity_refine, generate_dataset, part_count_filter, AnnotatedCloud, Stage, SynthConfig, DEFAULT_EPS_FACTOR,
    DEFAULT_MAX_PARTS, DEFAULT_MIN_PARTS, DEFAULT_MIN_PTS,
};
use partseg::decoder::{Decoder, DecoderConfig};
use partseg::encoder::{sample_point_features, TriPlaneField};
use partseg::geometry::{knn, PartLabelMap, Point3, PointSet};
use partseg::inference::{full_segment_from_predictions, knn_propagate, knn_propagate_traced, resolve_overlaps, FullSegConfig};
use partseg::nn::ParameterStore;

use crate::util::{ensure, random_points, random_tensor, randomize};
use crate::Check;

// ------------------------------------------------------------- tri-plane

fn random_field(dim: usize, res: usize, seed: u64) -> TriPlaneField {
    let mut f = TriPlaneField::zeros(dim, res);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for plane in f.planes.iter_mut() {
        plane.iter_mut().for_each(|v| *v = rng.random_range(-1.0f32..1.0));
    }
    f
}

/// Scalar bilinear formula per plane and channel, in binary64.
fn bilinear_oracle(field: &TriPlaneField, p: Point3) -> Vec<f64> {
    let res = field.res;
    let top = (res - 1) as f64;
    let axes = [(0usize, 1usize), (1, 2), (2, 0)];
    let mut out = vec![0.0; field.dim];
    for (plane, (a, b)) in axes.into_iter().enumerate() {
        let gx = ((p[a] as f64 + 1.0) * 0.5 * top).clamp(0.0, top);
        let gy = ((p[b] as f64 + 1.0) * 0.5 * top).clamp(0.0, top);
        let x0 = (gx.floor() as usize).min(res - 2);
        let y0 = (gy.floor() as usize).min(res - 2);
        let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
        for (ch, o) in out.iter_mut().enumerate() {
            let t = |r: usize, c: usize| field.cell(plane, r, c)[ch] as f64;
            *o += (1.0 - ty) * ((1.0 - tx) * t(y0, x0) + tx * t(y0, x0 + 1))
                + ty * ((1.0 - tx) * t(y0 + 1, x0) + tx * t(y0 + 1, x0 + 1));
        }
    }
    out
}

fn grid_nodes_exact(field: &TriPlaneField, nodes: &[usize]) -> Result<usize, String> {
    let top = (field.res - 1) as f32;
    let coord = |i: usize| -1.0 + 2.0 * i as f32 / top;
    let mut count = 0;
    for &i in nodes {
        for &j in nodes {
            for &k in nodes {
                let p = [coord(i), coord(j), coord(k)];
                let got = sample_point_features(field, &[p]).features;
                for ch in 0..field.dim {
                    let want = field.cell(0, j, i)[ch] + field.cell(1, k, j)[ch] + field.cell(2, i, k)[ch];
                    ensure(got.row(0)[ch].to_bits() == want.to_bits(), || {
                        format!("res {} node ({i},{j},{k}) ch {ch}: {} vs {want}", field.res, got.row(0)[ch])
                    })?;
                }
                count += 1;
            }
        }
    }
    Ok(count)
}

pub fn triplane_fidelity() -> Check {
    let field = random_field(96, 32, 1);
    let pts = random_points(1000, 2);
    let got = sample_point_features(&field, &pts);
    ensure(got.clamped_queries == 0, || format!("{} queries clamped", got.clamped_queries))?;
    let mut worst = 0.0f64;
    for (n, p) in pts.iter().enumerate() {
        let want = bilinear_oracle(&field, *p);
        for (a, b) in got.features.row(n).iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max deviation from oracle {worst:e}"))?;
    // Grid nodes: every node of grids whose node coordinates are exact
    // binary32 values, and the representable (corner) nodes of the 32 grid.
    let mut nodes = 0;
    for res in [9usize, 17, 33] {
        nodes += grid_nodes_exact(&random_field(4, res, res as u64), &(0..res).collect::<Vec<_>>())?;
    }
    nodes += grid_nodes_exact(&field, &[0, 31])?;
    Ok(format!("1000 queries (D=96, 32x32): max |dev| {worst:.2e} < 1e-6; {nodes} grid-node queries bit-exact"))
}

// ------------------------------------------------------------------ FiLM

pub fn film_contracts() -> Check {
    let cfg = DecoderConfig::default();
    let n = 160;
    let mut absent_checked = 0;
    let mut zero_checked = 0;
    for seed in 0..4u64 {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(&mut store, cfg, &mut rng).map_err(|e| e.to_string())?;
        let pts = random_points(n, 10 + seed);
        let x = random_tensor(&[n, cfg.dim], 1.0, 20 + seed);
        let feats = random_tensor(&[n, cfg.dim], 1.0, 30 + seed);
        let anchors: Vec<usize> = (0..n).step_by(3).collect();

        // Freshly initialised projection: FiLM is the identity for any scale.
        for f in &dec.films {
            let e = random_tensor(&[1, dec.scale.width()], 5.0, seed);
            let (y, _) = f.forward(&store, &x, &e).map_err(|e| e.to_string())?;
            ensure(y == x, || format!("seed {seed}: fresh FiLM layer is not the identity"))?;
        }

        randomize(&mut store, 0.5, 40 + seed);
        // ABSENT scale equals the FiLM-bypassed block stack.
        let (absent, _) = dec.modulate(&store, &x, None, &anchors).map_err(|e| e.to_string())?;
        let mut z = x.clone();
        for b in &dec.blocks {
            z = b.forward(&store, &z, &anchors).map_err(|e| e.to_string())?.0;
        }
        ensure(absent == z, || format!("seed {seed}: absent-scale path differs from bypassed stack"))?;
        let (present, _) = dec.modulate(&store, &x, Some(0.5), &anchors).map_err(|e| e.to_string())?;
        ensure(present != absent, || format!("seed {seed}: random FiLM parameters had no effect"))?;
        absent_checked += 1;

        // Zero projection: output independent of s, bit for bit.
        for f in &dec.films {
            store.get_mut(f.proj.w).data_mut().fill(0.0);
            store.get_mut(f.proj.b).data_mut().fill(0.0);
        }
        let base = dec.modulate(&store, &x, Some(0.0), &anchors).map_err(|e| e.to_string())?.0;
        let (base_probs, _) = dec.forward(&store, &feats, &pts, 7, Some(0.0), Some(&anchors)).map_err(|e| e.to_string())?;
        for s in [0.05f32, 0.2, 0.37, 0.5, 0.81, 1.0] {
            let y = dec.modulate(&store, &x, Some(s), &anchors).map_err(|e| e.to_string())?.0;
            ensure(y == base, || format!("seed {seed}: modulator output changed at s = {s}"))?;
            let (p, _) = dec.forward(&store, &feats, &pts, 7, Some(s), Some(&anchors)).map_err(|e| e.to_string())?;
            ensure(p == base_probs, || format!("seed {seed}: decoder output changed at s = {s}"))?;
            zero_checked += 1;
        }
    }
    Ok(format!(
        "D=96, L_m=2: fresh FiLM identity; absent == bypassed on {absent_checked} random parameter sets; \
         zero projection bit-equal across {zero_checked} (seed, s) pairs"
    ))
}

// ------------------------------------------------------------ Algorithm 1

fn random_masks(n: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<bool>>, Vec<Vec<f32>>) {
    let conf: Vec<Vec<f32>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()).collect();
    let masks = conf.iter().map(|c| c.iter().map(|&p| p >= 0.55).collect()).collect();
    (masks, conf)
}

fn overlap_oracle(masks: &[Vec<bool>], conf: &[Vec<f32>], pts: &[Point3], alpha: f64) -> Vec<i32> {
    let centres: Vec<[f64; 3]> = masks
        .iter()
        .map(|m| {
            let members: Vec<&Point3> = pts.iter().zip(m).filter(|(_, &b)| b).map(|(p, _)| p).collect();
            let c = members.len().max(1) as f64;
            // Centres are points, stored in binary32 like the cloud.
            std::array::from_fn(|a| (members.iter().map(|p| p[a] as f64).sum::<f64>() / c) as f32 as f64)
        })
        .collect();
    (0..pts.len())
        .map(|i| {
            let cover: Vec<usize> = (0..masks.len()).filter(|&k| masks[k][i]).collect();
            if cover.len() <= 1 {
                return cover.first().map_or(-1, |&k| k as i32);
            }
            let score = |k: usize| {
                let d = (0..3).map(|a| (pts[i][a] as f64 - centres[k][a]).powi(2)).sum::<f64>().sqrt();
                alpha * conf[k][i] as f64 + (1.0 - alpha) * (-d).exp()
            };
            cover.iter().copied().fold(cover[0], |b, k| if score(k) > score(b) { k } else { b }) as i32
        })
        .collect()
}

fn propagate_oracle(assignment: &[i32], pts: &[Point3], k: usize, rounds: usize) -> Vec<u32> {
    let n = pts.len();
    let d2 = |a: usize, b: usize| (0..3).map(|c| (pts[a][c] as f64 - pts[b][c] as f64).powi(2)).sum::<f64>();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut c: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            c.sort_by(|&a, &b| d2(i, a).total_cmp(&d2(i, b)).then(a.cmp(&b)));
            c.truncate(k);
            c
        })
        .collect();
    let mut cur = assignment.to_vec();
    for _ in 0..rounds {
        let prev = cur.clone();
        for i in (0..n).filter(|&i| prev[i] < 0) {
            let mut counts = std::collections::BTreeMap::<i32, usize>::new();
            for &j in nbrs[i].iter().filter(|&&j| prev[j] >= 0) {
                *counts.entry(prev[j]).or_default() += 1;
            }
            if let Some(top) = counts.values().max().copied() {
                cur[i] = *counts.iter().find(|(_, &c)| c == top).unwrap().0;
            }
        }
    }
    let assigned: Vec<usize> = (0..n).filter(|&i| cur[i] >= 0).collect();
    (0..n)
        .map(|i| {
            if cur[i] >= 0 {
                return cur[i] as u32;
            }
            let j = assigned.iter().copied().fold(assigned[0], |b, j| if d2(i, j) < d2(i, b) { j } else { b });
            cur[j] as u32
        })
        .collect()
}

pub fn full_segmentation_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut partitions = 0;
    for case in 0..200u64 {
        let n = rng.random_range(1..240);
        let k = rng.random_range(1..7);
        let pts = PointSet::new(random_points(n, 1000 + case)).unwrap();
        let conf: Vec<Vec<f32>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()).collect();
        let cfg = FullSegConfig {
            theta: rng.random_range(0.0f32..1.0),
            alpha_conf: rng.random_range(0.0f32..=1.0),
            k: rng.random_range(1..10),
            rounds: rng.random_range(0..7),
        };
        let res = full_segment_from_predictions(&pts, conf, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        ensure(res.labels.len() == n && res.labels.iter().all(|&l| (l as usize) < k), || {
            format!("case {case}: labels are not a partition into {k} parts")
        })?;
        partitions += 1;
    }

    let mut overlap_cases = 0;
    for seed in 0..12u64 {
        let pts = random_points(200, 2000 + seed);
        let (masks, conf) = random_masks(200, 3, &mut rng);
        for alpha in [0.0f32, 0.25, 0.5, 1.0] {
            let got = resolve_overlaps(&masks, &conf, &pts, alpha).map_err(|e| e.to_string())?;
            let want = overlap_oracle(&masks, &conf, &pts, alpha as f64);
            ensure(got == want, || format!("resolve_overlaps seed {seed} alpha {alpha} disagrees with oracle"))?;
            overlap_cases += 1;
        }
    }

    let mut propagate_cases = 0;
    for seed in 0..8u64 {
        let pts = random_points(200, 3000 + seed);
        let set = PointSet::new(pts.clone()).unwrap();
        let mut a: Vec<i32> = (0..200).map(|_| if rng.random_bool(0.15) { rng.random_range(0..4) } else { -1 }).collect();
        a[0] = 2;
        for k in [2usize, 4, 8] {
            let g = knn(&set, k).map_err(|e| e.to_string())?;
            for rounds in [0usize, 1, 5] {
                let got = knn_propagate(&a, &g, &pts, rounds).map_err(|e| e.to_string())?;
                ensure(got == propagate_oracle(&a, &pts, k, rounds), || {
                    format!("knn_propagate seed {seed} k {k} rounds {rounds} disagrees with oracle")
                })?;
                propagate_cases += 1;
            }
        }
    }

    // Six unassigned points whose 2-NN stay inside the chain: no vote round
    // reaches them and the fallback labels all six. x = 12 is equidistant
    // from both anchors and takes the lower index.
    let mut chain: Vec<Point3> = vec![[0.0, 0.0, 0.0], [24.0, 0.0, 0.0]];
    chain.extend((10..16).map(|x| [x as f32, 0.0, 0.0]));
    let mut a = vec![-1; 8];
    a[0] = 0;
    a[1] = 1;
    let g = knn(&PointSet::new(chain.clone()).unwrap(), 2).map_err(|e| e.to_string())?;
    let (labels, fallback) = knn_propagate_traced(&a, &g, &chain, 5).map_err(|e| e.to_string())?;
    ensure(labels == vec![0, 1, 0, 0, 0, 1, 1, 1] && fallback == 6, || {
        format!("6-chain: labels {labels:?}, fallback {fallback}")
    })?;
    Ok(format!(
        "{partitions} random full segmentations are partitions; resolve_overlaps matches oracle on {overlap_cases} \
         200-point instances; knn_propagate matches oracle on {propagate_cases}; 6-chain after 5 rounds: fallback \
         fills 6 points, labels {labels:?}"
    ))
}

// --------------------------------------------------------------- pipeline

fn sphere(center: Point3, r: f32, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let v: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..1.0));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
            std::array::from_fn(|k| center[k] + r * v[k] / norm)
        })
        .collect()
}

fn labelled(points: Vec<Point3>, labels: Vec<u32>) -> AnnotatedCloud {
    let map = PartLabelMap::compact(&labels);
    AnnotatedCloud { id: 0, points: PointSet::new(points).unwrap(), labels: Some(map), stage: Stage::Raw }
}

pub fn pipeline_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pts = sphere([0.0, 0.0, 0.0], 0.25, 300, &mut rng);
    pts.extend(sphere([1.0, 0.0, 0.0], 0.25, 300, &mut rng));
    // Geometry oracle: eps from the label's bounding box, and the two spheres
    // are farther apart than eps.
    let lo: [f64; 3] = std::array::from_fn(|a| pts.iter().map(|p| p[a] as f64).fold(f64::INFINITY, f64::min));
    let hi: [f64; 3] = std::array::from_fn(|a| pts.iter().map(|p| p[a] as f64).fold(f64::NEG_INFINITY, f64::max));
    let eps = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt() * DEFAULT_EPS_FACTOR as f64;
    let gap = pts[..300]
        .iter()
        .flat_map(|a| pts[300..].iter().map(move |b| (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()))
        .fold(f64::INFINITY, f64::min);
    ensure(gap > eps, || format!("instance invalid: gap {gap} <= eps {eps}"))?;
    let refined = connectivity_refine(&labelled(pts, vec![0; 600]), DEFAULT_EPS_FACTOR, DEFAULT_MIN_PTS).map_err(|e| e.to_string())?;
    let l = refined.labels.as_ref().unwrap();
    ensure(l.part_count() == 2, || format!("two spheres refined into {} labels", l.part_count()))?;
    ensure(l.labels()[..300].iter().all(|&v| v == l.labels()[0]) && l.labels()[300..].iter().all(|&v| v == l.labels()[300]), || {
        "split does not follow the spheres".into()
    })?;

    let mut unchanged = 0;
    let shapes = generate_dataset(30, 5, 2048, &SynthConfig::default()).map_err(|e| e.to_string())?;
    for c in &shapes {
        let r = connectivity_refine(c, DEFAULT_EPS_FACTOR, DEFAULT_MIN_PTS).map_err(|e| e.to_string())?;
        ensure(r.labels == c.labels, || format!("shape {} changed by refinement", c.id))?;
        unchanged += 1;
    }
    let mut blobs = sphere([0.0, 0.0, 0.0], 0.3, 200, &mut rng);
    blobs.extend(sphere([0.6, 0.0, 0.0], 0.3, 200, &mut rng));
    let touching = labelled(blobs, (0..400).map(|i| (i >= 200) as u32).collect());
    let r = connectivity_refine(&touching, DEFAULT_EPS_FACTOR, DEFAULT_MIN_PTS).map_err(|e| e.to_string())?;
    ensure(r.labels == touching.labels, || "touching single-blob labels changed".into())?;
    unchanged += 1;

    let with_parts = |k: u32| labelled((0..k).map(|i| [i as f32, 0.0, 0.0]).collect(), (0..k).collect());
    let cases = [(1u32, false), (2, true), (50, true), (51, false)];
    for (k, want) in cases {
        let got = part_count_filter(&with_parts(k), DEFAULT_MIN_PARTS, DEFAULT_MAX_PARTS);
        ensure(got == want, || format!("part_count_filter({k} parts) = {got}"))?;
    }
    Ok(format!(
        "two spheres (gap {gap:.3} > eps {eps:.3}) -> 2 labels; {unchanged} connected-label clouds unchanged; \
         part_count_filter 1/2/50/51 -> false/true/true/false"
    ))
}
