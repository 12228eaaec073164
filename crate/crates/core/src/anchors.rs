//! Anchor grid generation over the feature pyramid.
//!
//! Each pyramid level tiles the image with one anchor group per grid cell,
//! centered at `((i + 0.5) * stride, (j + 0.5) * stride)`. Anchor width and
//! height are `base * scale * sqrt(1/ratio)` and `base * scale * sqrt(ratio)`,
//! so the area `(base * scale)^2` is preserved across aspect ratios. Anchors
//! are not clipped at image borders.

use serde::{Deserialize, Serialize};

use crate::dataset::BBox;
use crate::error::ConfigError;

/// Per-level anchor layout. Loadable from JSON or TOML with these exact field
/// names; missing fields fall back to the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub levels: Vec<u32>,
    pub strides: Vec<f64>,
    pub base_sizes: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub scales_per_level: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            levels: vec![2, 3, 4, 5, 6],
            strides: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            base_sizes: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            scales_per_level: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.levels.is_empty() {
            return Err(ConfigError::Invalid("levels must not be empty".into()));
        }
        if self.levels.len() != self.strides.len() || self.levels.len() != self.base_sizes.len() {
            return Err(ConfigError::Invalid(format!(
                "levels ({}), strides ({}) and base_sizes ({}) must have equal lengths",
                self.levels.len(),
                self.strides.len(),
                self.base_sizes.len()
            )));
        }
        if !strictly_increasing_positive(&self.strides) {
            return Err(ConfigError::Invalid(
                "strides must be positive, finite and strictly increasing".into(),
            ));
        }
        if !strictly_increasing_positive(&self.base_sizes) {
            return Err(ConfigError::Invalid(
                "base_sizes must be positive, finite and strictly increasing".into(),
            ));
        }
        if self.aspect_ratios.is_empty()
            || !self
                .aspect_ratios
                .iter()
                .all(|r| r.is_finite() && *r > 0.0)
        {
            return Err(ConfigError::Invalid(
                "aspect_ratios must be a non-empty list of positive values".into(),
            ));
        }
        if self.scales_per_level.is_empty()
            || !self
                .scales_per_level
                .iter()
                .all(|s| s.is_finite() && *s > 0.0)
        {
            return Err(ConfigError::Invalid(
                "scales_per_level must be a non-empty list of positive values".into(),
            ));
        }
        Ok(())
    }

    /// Anchors generated per grid cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() * self.scales_per_level.len()
    }
}

fn strictly_increasing_positive(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite() && *v > 0.0)
        && values.windows(2).all(|w| w[0] < w[1])
}

/// All anchors of one pyramid level, in row-major grid order with the
/// per-cell ratio/scale group innermost.
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub level: u32,
    pub stride: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub boxes: Vec<BBox>,
}

/// The full predefined anchor set for one image size.
///
/// Flat anchor order — the column order of IoU matrices — is levels
/// ascending, then row-major grid, then ratio, then scale.
#[derive(Debug, Clone)]
pub struct AnchorPyramid {
    levels: Vec<LevelAnchors>,
}

impl AnchorPyramid {
    pub fn levels(&self) -> &[LevelAnchors] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Total anchors across all levels.
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor boxes in flat order.
    pub fn iter_flat(&self) -> impl Iterator<Item = &BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter())
    }

    /// Level position (index into `levels()`) owning a flat anchor index.
    pub fn level_pos_of(&self, flat_index: usize) -> Option<usize> {
        let mut start = 0;
        for (pos, level) in self.levels.iter().enumerate() {
            let end = start + level.boxes.len();
            if flat_index < end {
                return Some(pos);
            }
            start = end;
        }
        None
    }

    /// Anchor box at a flat index.
    pub fn flat(&self, flat_index: usize) -> Option<&BBox> {
        let mut rest = flat_index;
        for level in &self.levels {
            if rest < level.boxes.len() {
                return Some(&level.boxes[rest]);
            }
            rest -= level.boxes.len();
        }
        None
    }
}

/// Build the anchor pyramid for an image. Grids use ceiling division so every
/// pixel is covered; the smallest legal image is 1x1 (one cell per level).
pub fn build_pyramid(
    cfg: &AnchorConfig,
    image_w: u32,
    image_h: u32,
) -> Result<AnchorPyramid, ConfigError> {
    cfg.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(ConfigError::BadImageSize {
            width: image_w,
            height: image_h,
        });
    }

    let mut levels = Vec::with_capacity(cfg.levels.len());
    for (idx, &level) in cfg.levels.iter().enumerate() {
        let stride = cfg.strides[idx];
        let base = cfg.base_sizes[idx];
        let grid_w = (f64::from(image_w) / stride).ceil() as usize;
        let grid_h = (f64::from(image_h) / stride).ceil() as usize;

        let mut boxes = Vec::with_capacity(grid_w * grid_h * cfg.anchors_per_cell());
        for j in 0..grid_h {
            for i in 0..grid_w {
                let cx = (i as f64 + 0.5) * stride;
                let cy = (j as f64 + 0.5) * stride;
                for &ratio in &cfg.aspect_ratios {
                    for &scale in &cfg.scales_per_level {
                        let w = base * scale * (1.0 / ratio).sqrt();
                        let h = base * scale * ratio.sqrt();
                        boxes.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h));
                    }
                }
            }
        }
        levels.push(LevelAnchors {
            level,
            stride,
            grid_w,
            grid_h,
            boxes,
        });
    }
    Ok(AnchorPyramid { levels })
}

/// Exact anchor count per level; the sum equals the flat anchor total.
pub fn total_anchors(p: &AnchorPyramid) -> Vec<usize> {
    p.levels.iter().map(|l| l.boxes.len()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        AnchorConfig::default().validate().unwrap();
    }

    #[test]
    fn default_config_on_32px_image() {
        let p = build_pyramid(&AnchorConfig::default(), 32, 32).unwrap();
        assert_eq!(p.levels()[0].grid_w, 8);
        assert_eq!(p.levels()[0].grid_h, 8);
        assert_eq!(p.levels()[0].boxes.len(), 192);
        assert_eq!(p.levels()[4].grid_w, 1);
        assert_eq!(p.levels()[4].boxes.len(), 3);
        assert_eq!(total_anchors(&p), vec![192, 48, 12, 3, 3]);
        assert_eq!(p.len(), 192 + 48 + 12 + 3 + 3);
    }

    #[test]
    fn one_pixel_image_gives_single_cell_grids() {
        let p = build_pyramid(&AnchorConfig::default(), 1, 1).unwrap();
        assert_eq!(total_anchors(&p), vec![3, 3, 3, 3, 3]);
    }

    #[test]
    fn doubling_image_side_quadruples_p2_count() {
        let cfg = AnchorConfig::default();
        let p1 = build_pyramid(&cfg, 64, 64).unwrap();
        let p2 = build_pyramid(&cfg, 128, 128).unwrap();
        assert_eq!(total_anchors(&p2)[0], 4 * total_anchors(&p1)[0]);
    }

    #[test]
    fn zero_image_dimension_rejected() {
        let err = build_pyramid(&AnchorConfig::default(), 0, 32).unwrap_err();
        assert!(matches!(err, ConfigError::BadImageSize { .. }));
    }

    #[test]
    fn unit_ratio_anchor_is_exact() {
        let cfg = AnchorConfig {
            levels: vec![3],
            strides: vec![8.0],
            base_sizes: vec![16.0],
            aspect_ratios: vec![1.0],
            scales_per_level: vec![1.0],
        };
        let p = build_pyramid(&cfg, 8, 8).unwrap();
        let b = &p.levels()[0].boxes[0];
        assert_eq!((b.w, b.h), (16.0, 16.0));
        // Centered on the cell center (4, 4).
        assert_eq!((b.x, b.y), (-4.0, -4.0));
    }

    #[test]
    fn aspect_ratio_preserves_area() {
        let cfg = AnchorConfig {
            levels: vec![3],
            strides: vec![8.0],
            base_sizes: vec![16.0],
            aspect_ratios: vec![0.5],
            scales_per_level: vec![1.0],
        };
        let p = build_pyramid(&cfg, 8, 8).unwrap();
        let b = &p.levels()[0].boxes[0];
        assert!((b.w - 16.0 * 2.0_f64.sqrt()).abs() < 1e-9);
        assert!((b.h - 16.0 / 2.0_f64.sqrt()).abs() < 1e-9);
        assert!((b.area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = AnchorConfig::default();
        cfg.strides.pop();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let cfg = AnchorConfig {
            strides: vec![4.0, 4.0, 16.0, 32.0, 64.0],
            ..AnchorConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = AnchorConfig {
            aspect_ratios: vec![1.0, -2.0],
            ..AnchorConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = AnchorConfig {
            scales_per_level: vec![],
            ..AnchorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_config_files_fall_back_to_defaults() {
        let cfg = AnchorConfig::from_json(r#"{"aspect_ratios":[1.0]}"#).unwrap();
        assert_eq!(cfg.aspect_ratios, vec![1.0]);
        assert_eq!(cfg.strides, AnchorConfig::default().strides);

        let cfg = AnchorConfig::from_json("{}").unwrap();
        assert_eq!(cfg, AnchorConfig::default());

        let cfg = AnchorConfig::from_toml("base_sizes = [2.0, 4.0, 8.0, 16.0, 32.0]\n").unwrap();
        assert_eq!(cfg.base_sizes, vec![2.0, 4.0, 8.0, 16.0, 32.0]);
        assert_eq!(cfg.levels, AnchorConfig::default().levels);
    }

    #[test]
    fn malformed_config_text_is_config_error() {
        assert!(matches!(
            AnchorConfig::from_json("{not json"),
            Err(ConfigError::Json(_))
        ));
        assert!(matches!(
            AnchorConfig::from_toml("strides = [4.0"),
            Err(ConfigError::Toml(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = AnchorConfig::default();
        let a = build_pyramid(&cfg, 123, 77).unwrap();
        let b = build_pyramid(&cfg, 123, 77).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter_flat().zip(b.iter_flat()) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
            assert_eq!(x.w.to_bits(), y.w.to_bits());
            assert_eq!(x.h.to_bits(), y.h.to_bits());
        }
    }

    #[test]
    fn flat_indexing_matches_level_layout() {
        let p = build_pyramid(&AnchorConfig::default(), 32, 32).unwrap();
        assert_eq!(p.level_pos_of(0), Some(0));
        assert_eq!(p.level_pos_of(191), Some(0));
        assert_eq!(p.level_pos_of(192), Some(1));
        assert_eq!(p.level_pos_of(192 + 48 + 12 + 3 + 2), Some(4));
        assert_eq!(p.level_pos_of(258), None);
        assert_eq!(p.flat(192).unwrap(), &p.levels()[1].boxes[0]);
    }
}
