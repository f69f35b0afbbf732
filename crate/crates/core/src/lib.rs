//! Cross-domain adaptation for keypoint estimation.
//!
//! A desk-scale framework for training heatmap keypoint estimators across
//! domains with severe shift (humans to animals, one animal species to
//! another). Training combines a pose loss on labeled sources with an
//! adversarial domain discriminator, then boosts the target domain with
//! self-paced pseudo-labels under alternating source/target optimisation.
//!
//! Modules, bottom-up:
//!
//! - [`types`], [`heatmap`], [`schema`]: shared domain types and the heatmap codec
//! - [`datasets`]: annotation I/O, skeleton alignment, bone statistics,
//!   synthetic two-domain generation, splits
//! - [`nn`], [`network`]: layers and the four-group pose network
//! - [`losses`], [`optim`]: loss stack, adversarial step, RMSProp
//! - [`wscda`]: the mixed-batch adversarial trainer
//! - [`pplo`]: pseudo-label store, confidence filter, alternating epochs
//! - [`eval`]: OKS, mAP, PCK and run reports
//! - [`experiment`], [`config`], [`commands`]: run configuration, desk-scale
//!   experiments and the command implementations behind the binary

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heatmap;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pplo;
pub mod schema;
pub mod types;
pub mod wscda;

pub use error::{Error, Result};
pub use heatmap::{decode_heatmaps, encode_heatmaps, HeatmapStack};
pub use network::{DomainPrediction, Group, Model, ModelConfig};
pub use schema::{align_skeleton, SkeletonSchema};
pub use types::{Domain, Image, Instance, Keypoint, Pose};
