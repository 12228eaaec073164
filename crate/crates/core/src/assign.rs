//! Max-IoU assignment of ground truths to pyramid levels.
//!
//! Every ground truth is matched to its single best-overlapping anchor; the
//! per-level tallies of those matches, accumulated over a dataset, feed the
//! fusion-factor computation. Accumulation streams image by image — the full
//! dataset-wide IoU matrix is never materialized — and per-image work runs in
//! parallel, which is safe because the tallies reduce by integer addition.

use std::collections::HashMap;
use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_pyramid, AnchorConfig, AnchorPyramid};
use crate::dataset::{BBox, Dataset};
use crate::error::AssignError;

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, AssignError> {
    check_positive_area(a)?;
    check_positive_area(b)?;
    Ok(iou_unchecked(a, b))
}

fn check_positive_area(b: &BBox) -> Result<(), AssignError> {
    if !b.is_valid() {
        return Err(AssignError::DegenerateBox { w: b.w, h: b.h });
    }
    Ok(())
}

#[inline]
fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let ix = a.right().min(b.right()) - a.x.max(b.x);
    if ix <= 0.0 {
        return 0.0;
    }
    let iy = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Dense IoU matrix: one row per ground truth, one column per anchor in the
/// pyramid's flat order.
#[derive(Debug, Clone)]
pub struct IoUMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IoUMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Build a matrix directly from row data; rows must all have `cols`
    /// entries in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == cols));
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            data.extend(r);
        }
        Self {
            rows: n,
            cols,
            data,
        }
    }
}

/// IoU of every ground truth against every anchor of the pyramid.
pub fn iou_matrix(gts: &[BBox], pyramid: &AnchorPyramid) -> Result<IoUMatrix, AssignError> {
    for gt in gts {
        check_positive_area(gt)?;
    }
    let cols = pyramid.len();
    let mut data = Vec::with_capacity(gts.len() * cols);
    for gt in gts {
        for anchor in pyramid.iter_flat() {
            data.push(iou_unchecked(gt, anchor));
        }
    }
    Ok(IoUMatrix {
        rows: gts.len(),
        cols,
        data,
    })
}

/// The selected anchor for one ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMatch {
    /// Flat anchor index into the pyramid.
    pub anchor_index: usize,
    /// Pyramid level of the selected anchor.
    pub level: u32,
    pub iou: f64,
    /// True when no anchor overlapped this ground truth at all.
    pub zero_overlap: bool,
}

/// One [`GtMatch`] per ground truth, row order preserved.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub matches: Vec<GtMatch>,
}

/// Select the max-IoU anchor for every ground truth row. Ties break toward
/// the lowest flat anchor index, i.e. the lowest level. Rows with an all-zero
/// IoU still pick column 0 but are flagged `zero_overlap`.
pub fn match_gt(m: &IoUMatrix, pyramid: &AnchorPyramid) -> Result<MatchResult, AssignError> {
    if m.cols() == 0 {
        return Err(AssignError::EmptyMatrix);
    }
    let mut matches = Vec::with_capacity(m.rows());
    for row in 0..m.rows() {
        let values = m.row(row);
        let mut best = 0usize;
        for (col, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = col;
            }
        }
        let pos = pyramid
            .level_pos_of(best)
            .ok_or(AssignError::AnchorIndexOutOfRange {
                index: best,
                total: pyramid.len(),
            })?;
        matches.push(GtMatch {
            anchor_index: best,
            level: pyramid.levels()[pos].level,
            iou: values[best],
            zero_overlap: values[best] == 0.0,
        });
    }
    Ok(MatchResult { matches })
}

/// Ground-truth tallies per pyramid level, ordered like the pyramid's levels
/// (`[N_P2, N_P3, N_P4, N_P5, N_P6]` for the default five-level layout).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelCounts {
    counts: Vec<u64>,
}

impl LevelCounts {
    pub fn zeros(levels: usize) -> Self {
        Self {
            counts: vec![0; levels],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, level_pos: usize) -> u64 {
        self.counts[level_pos]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn bump(&mut self, level_pos: usize) {
        self.counts[level_pos] += 1;
    }
}

impl AddAssign<&LevelCounts> for LevelCounts {
    fn add_assign(&mut self, rhs: &LevelCounts) {
        assert_eq!(self.counts.len(), rhs.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

/// Count matched ground truths per level. Zero-overlap matches are skipped
/// unless `include_zero_overlap` is set.
pub fn count_per_level(
    r: &MatchResult,
    pyramid: &AnchorPyramid,
    include_zero_overlap: bool,
) -> Result<LevelCounts, AssignError> {
    let mut counts = LevelCounts::zeros(pyramid.num_levels());
    for m in &r.matches {
        let pos =
            pyramid
                .level_pos_of(m.anchor_index)
                .ok_or(AssignError::AnchorIndexOutOfRange {
                    index: m.anchor_index,
                    total: pyramid.len(),
                })?;
        if m.zero_overlap && !include_zero_overlap {
            continue;
        }
        counts.bump(pos);
    }
    Ok(counts)
}

/// Level tallies plus bookkeeping for the stats report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetAssignment {
    pub counts: LevelCounts,
    /// Ground truths whose best IoU was exactly zero.
    pub zero_overlap: u64,
    /// Non-ignore ground truths seen.
    pub ground_truths: u64,
}

/// Assign every non-ignore ground truth in the dataset and accumulate level
/// tallies. Work is per-image and order-independent.
pub fn assign_dataset(
    d: &Dataset,
    cfg: &AnchorConfig,
    include_zero_overlap: bool,
) -> Result<DatasetAssignment, AssignError> {
    cfg.validate()?;
    let mut boxes_by_image: HashMap<i64, Vec<BBox>> = HashMap::new();
    for ann in d.annotations.iter().filter(|a| !a.ignore) {
        boxes_by_image.entry(ann.image_id).or_default().push(ann.bbox);
    }

    let levels = cfg.levels.len();
    d.images
        .par_iter()
        .map(|im| {
            let empty = DatasetAssignment {
                counts: LevelCounts::zeros(levels),
                zero_overlap: 0,
                ground_truths: 0,
            };
            let Some(gts) = boxes_by_image.get(&im.id) else {
                return Ok(empty);
            };
            if gts.is_empty() {
                return Ok(empty);
            }
            let pyramid = build_pyramid(cfg, im.width, im.height)?;
            let mut counts = LevelCounts::zeros(levels);
            let mut zero_overlap = 0;
            for gt in gts {
                check_positive_area(gt)?;
                let (pos, best_iou) = best_level_for(gt, &pyramid);
                if best_iou == 0.0 {
                    zero_overlap += 1;
                    if !include_zero_overlap {
                        continue;
                    }
                }
                counts.bump(pos);
            }
            Ok(DatasetAssignment {
                counts,
                zero_overlap,
                ground_truths: gts.len() as u64,
            })
        })
        .try_reduce(
            || DatasetAssignment {
                counts: LevelCounts::zeros(levels),
                zero_overlap: 0,
                ground_truths: 0,
            },
            |mut acc, part| {
                acc.counts += &part.counts;
                acc.zero_overlap += part.zero_overlap;
                acc.ground_truths += part.ground_truths;
                Ok(acc)
            },
        )
}

/// Streaming equivalent of `match_gt` for a single ground truth: level
/// position and IoU of the best anchor, first-index tie-breaking.
fn best_level_for(gt: &BBox, pyramid: &AnchorPyramid) -> (usize, f64) {
    let mut best_pos = 0;
    let mut best_iou = 0.0;
    let mut first = true;
    for (pos, level) in pyramid.levels().iter().enumerate() {
        for anchor in &level.boxes {
            let v = iou_unchecked(gt, anchor);
            if first || v > best_iou {
                best_pos = pos;
                best_iou = v;
                first = false;
            }
        }
    }
    (best_pos, best_iou)
}

/// Per-level ground-truth tallies over a whole dataset, zero-overlap ground
/// truths excluded.
pub fn dataset_level_counts(d: &Dataset, cfg: &AnchorConfig) -> Result<LevelCounts, AssignError> {
    Ok(assign_dataset(d, cfg, false)?.counts)
}
