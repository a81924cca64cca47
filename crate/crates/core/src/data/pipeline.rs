use super::refine::{connectivity_refine, part_count_filter};
use super::synth::{generate_synthetic_shape, SynthConfig};
use super::validator::{quality_filter, ValidatorModel};
use super::{sample_surface_proportional, AnnotatedCloud, LabeledMesh, Stage};
use crate::error::Result;
use crate::geometry::normalize_unit_sphere;

/// Surface sampling followed by unit-sphere normalisation.
pub fn annotate(mesh: &LabeledMesh, n: usize, seed: u64) -> Result<AnnotatedCloud> {
    let mut cloud = sample_surface_proportional(mesh, n, seed)?;
    cloud.points = normalize_unit_sphere(cloud.points.coords())?;
    Ok(cloud)
}

/// Per-shape seed derived from the dataset seed (SplitMix64 finaliser).
fn shape_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` annotated synthetic clouds of `n` points each.
pub fn generate_dataset(count: usize, seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<AnnotatedCloud>> {
    (0..count as u64)
        .map(|i| {
            let s = shape_seed(seed, i);
            annotate(&generate_synthetic_shape(s, cfg)?, n, s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CurateConfig<'a> {
    pub validator: Option<&'a ValidatorModel>,
    pub threshold: f32,
    pub eps_factor: f32,
    pub min_pts: usize,
    pub min_parts: usize,
    pub max_parts: usize,
}

impl Default for CurateConfig<'_> {
    fn default() -> Self {
        Self {
            validator: None,
            threshold: 0.5,
            eps_factor: super::DEFAULT_EPS_FACTOR,
            min_pts: super::DEFAULT_MIN_PTS,
            min_parts: super::DEFAULT_MIN_PARTS,
            max_parts: super::DEFAULT_MAX_PARTS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CurateReport {
    pub input: usize,
    pub unlabelled: usize,
    pub dropped_quality: usize,
    pub split_clouds: usize,
    pub dropped_part_count: usize,
    pub output: usize,
}

/// Quality filtering, connectivity refinement and part-count filtering, in
/// that order. Without a validator the quality stage passes everything.
pub fn curate(clouds: &[AnnotatedCloud], cfg: &CurateConfig<'_>) -> Result<(Vec<AnnotatedCloud>, CurateReport)> {
    let mut report = CurateReport { input: clouds.len(), ..Default::default() };
    let mut out = Vec::new();
    for cloud in clouds {
        if cloud.labels.is_none() {
            report.unlabelled += 1;
            continue;
        }
        if let Some(v) = cfg.validator {
            if !quality_filter(cloud, v, cfg.threshold)?.keep {
                report.dropped_quality += 1;
                continue;
            }
        }
        let filtered = cloud.clone().with_stage(Stage::Filtered);
        let refined = connectivity_refine(&filtered, cfg.eps_factor, cfg.min_pts)?;
        if refined.part_count() != filtered.part_count() {
            report.split_clouds += 1;
        }
        if !part_count_filter(&refined, cfg.min_parts, cfg.max_parts) {
            report.dropped_part_count += 1;
            continue;
        }
        out.push(refined);
    }
    report.output = out.len();
    Ok((out, report))
}
