//! Statistic-based fusion factors for feature pyramid networks.
//!
//! The crate has two halves:
//!
//! * a dataset-statistics pipeline — parse detection annotations, tile anchor
//!   grids over each image, assign every ground truth to the pyramid level of
//!   its max-IoU anchor, and turn the per-level tallies into fusion factors;
//! * a small, exactly linear feature pyramid ([`fpn`]) with hand-written
//!   forward and reverse passes, used to check the algebraic properties the
//!   fusion factor relies on (weight-rescaling equivalence, gradient
//!   decomposition, decoupling at zero).
//!
//! Everything is deterministic: seeded generators, integer tallies, and pure
//! functions throughout.

pub mod anchors;
pub mod assign;
pub mod dataset;
pub mod error;
pub mod fpn;
pub mod fusion;
pub mod report;
pub mod verify;

pub use anchors::{build_pyramid, AnchorConfig, AnchorPyramid};
pub use assign::{
    assign_dataset, count_per_level, dataset_level_counts, iou, iou_matrix, match_gt,
    DatasetAssignment, IoUMatrix, LevelCounts, MatchResult,
};
pub use dataset::{filter_images, parse_annotations, validate, Annotation, BBox, Dataset,
    ImageRecord, ValidationReport};
pub use error::{AssignError, ConfigError, DatasetError, FpnError};
pub use fusion::{compute_factors, sweep_plan, AlphaFile, FusionFactors, SweepPlan};
