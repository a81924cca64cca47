//! Scale-aware, point-prompted part segmentation for 3D point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: normalisation, exact k-NN, bounding boxes, DBSCAN.
//! * [`data`]: labelled meshes, surface sampling, the synthetic shape
//!   generator, the annotation validator, connectivity refinement and the
//!   `PCPD` dataset format.
//! * [`nn`]: dense kernels with hand-written backward passes, AdamW, a
//!   finite-difference gradient checker and the `S2AM` checkpoint format.
//! * [`encoder`]: tri-plane feature field and the intra-instance
//!   contrastive objective.
//! * [`decoder`]: positional encoding, learnable scale embedding, FiLM
//!   modulation, bi-directional cross-attention and the mask head.
//! * [`training`]: segmentation losses and the decoupled training driver.
//! * [`inference`]: interactive and full segmentation, IoU metrics and the
//!   scale-perturbation sweep.
//! * [`service`]: HTTP JSON facade.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod nn;
pub mod service;
pub mod training;

pub use error::{Error, Result};
