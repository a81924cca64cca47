//! Point-consistent part encoder: a tri-plane feature field queried per point
//! and trained with an intra-instance contrastive objective.

mod contrastive;
mod train;
mod triplane;

pub use contrastive::{contrastive_loss, subsample_anchors, ContrastiveBatch, ContrastiveOutput, DEFAULT_ANCHORS, DEFAULT_TAU};
pub use train::{part_similarity, train_encoder, EncoderTrainConfig, EncoderTrainReport, PartSimilarity};
pub use triplane::{
    nearest_node, sample_point_features, sample_point_features_backward, to_grid, Encoder, EncoderConfig,
    PointFeatureMatrix, TriPlaneCache, TriPlaneField, PLANE_AXES, PLANE_NAMES,
};
