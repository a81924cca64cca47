//! Dataset construction: labelled meshes, area-proportional surface sampling,
//! a procedural shape generator, the annotation validator, connectivity
//! refinement, part-count filtering and the `PCPD` on-disk format.

mod mesh;
mod pcpd;
mod pipeline;
mod refine;
mod synth;
mod validator;

pub use mesh::{sample_surface_proportional, LabeledMesh, Triangle};
pub use pcpd::{dataset_read, dataset_write, read_dataset, write_dataset, MAGIC as PCPD_MAGIC, VERSION as PCPD_VERSION};
pub use pipeline::{annotate, curate, generate_dataset, CurateConfig, CurateReport};
pub use refine::{connectivity_refine, part_count_filter, DEFAULT_EPS_FACTOR, DEFAULT_MAX_PARTS, DEFAULT_MIN_PARTS, DEFAULT_MIN_PTS};
pub use synth::{generate_synthetic_shape, Primitive, SynthConfig};
pub use validator::{
    corrupt_labels, quality_filter, train_validator, ValidatorConfig, ValidatorModel, ValidatorReport, QualityVerdict,
};

use crate::geometry::{PartLabelMap, PointSet};

/// Curation stage a cloud has passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Raw = 0,
    Filtered = 1,
    Refined = 2,
}

impl Stage {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Stage::Raw),
            1 => Some(Stage::Filtered),
            2 => Some(Stage::Refined),
            _ => None,
        }
    }
}

/// A point cloud with optional per-point part labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedCloud {
    /// Source identifier (generator seed or record index).
    pub id: u64,
    pub points: PointSet,
    pub labels: Option<PartLabelMap>,
    pub stage: Stage,
}

impl AnnotatedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn part_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.part_count())
    }
}
