//! Machine-readable stats report emitted by the command-line front end.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::assign::{DatasetAssignment, LevelCounts};
use crate::fusion::FusionFactors;

pub const SCHEMA_VERSION: u32 = 1;

/// Input tallies as seen by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Images that survived the max-objects filter.
    pub images: usize,
    /// Images dropped by the filter.
    pub images_excluded: usize,
    /// All annotations on surviving images, ignore regions included.
    pub annotations: usize,
    /// Ignore regions on surviving images.
    pub ignored_annotations: usize,
    /// Non-ignore ground truths that entered the statistics.
    pub ground_truths: u64,
    /// Ground truths without any overlapping anchor.
    pub zero_overlap: u64,
    pub zero_overlap_included: bool,
}

/// The full output of a stats run. Serialization is field-order stable, so
/// two runs over the same inputs differ only in `timestamp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub timestamp: String,
    pub max_objects: usize,
    pub dataset: DatasetSummary,
    pub anchor_config: AnchorConfig,
    pub level_counts: LevelCounts,
    pub fusion_factors: FusionFactors,
}

impl StatsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tool_version: &str,
        timestamp: String,
        max_objects: usize,
        summary: DatasetSummary,
        anchor_config: AnchorConfig,
        assignment: &DatasetAssignment,
        factors: FusionFactors,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: tool_version.to_string(),
            timestamp,
            max_objects,
            dataset: summary,
            anchor_config,
            level_counts: assignment.counts.clone(),
            fusion_factors: factors,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        s.push('\n');
        s
    }
}
