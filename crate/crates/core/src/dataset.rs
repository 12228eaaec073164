//! Annotation parsing, filtering, and validation.
//!
//! The on-disk format is a minimal COCO-style JSON subset:
//!
//! ```json
//! {"images":[{"id":1,"width":640,"height":512,"file_name":"a.jpg"}],
//!  "annotations":[{"id":1,"image_id":1,"bbox":[10,10,16,16],"ignore":false}]}
//! ```
//!
//! `bbox` is `[x, y, w, h]` in continuous pixel coordinates (top-left origin),
//! `ignore` defaults to false, `file_name` is optional, and unknown fields are
//! ignored. Boxes are kept unrounded; rounding belongs to downstream consumers.

use std::collections::{HashMap, HashSet};
use std::num::NonZeroUsize;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::DatasetError;

/// Fraction of the image size used to pad the frame for the soft
/// out-of-bounds check.
const FRAME_PAD_FRACTION: f64 = 0.1;

/// Axis-aligned box in continuous pixel coordinates; `x`/`y` is the top-left
/// corner. Serialized as the 4-element array `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Positive extent on both axes, all coordinates finite.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.w, self.h].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(deserializer)?;
        for v in [x, y, w, h] {
            if !v.is_finite() {
                return Err(D::Error::custom("bbox values must be finite"));
            }
        }
        Ok(Self { x, y, w, h })
    }
}

/// One image entry; pixel data is never touched, only geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: i64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

/// One ground-truth box. `ignore` regions are kept on parse but excluded from
/// all statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: i64,
    pub image_id: i64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "is_false")]
    pub ignore: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Immutable after construction; safe to share read-only across workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    /// Serialize back to the annotation JSON format. `parse_annotations` of
    /// the output reproduces the dataset exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serialization cannot fail")
    }

    /// Non-ignore annotation count per image id.
    pub fn gt_counts_by_image(&self) -> HashMap<i64, usize> {
        let mut counts: HashMap<i64, usize> =
            self.images.iter().map(|im| (im.id, 0)).collect();
        for ann in self.annotations.iter().filter(|a| !a.ignore) {
            if let Some(c) = counts.get_mut(&ann.image_id) {
                *c += 1;
            }
        }
        counts
    }

    /// Total number of non-ignore annotations.
    pub fn ground_truths(&self) -> usize {
        self.annotations.iter().filter(|a| !a.ignore).count()
    }
}

// Raw mirror of the file schema. Dimensions stay signed here so that
// non-positive values surface as validation errors naming the record, not as
// serde type errors.
#[derive(Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawImage {
    id: i64,
    width: i64,
    height: i64,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: i64,
    image_id: i64,
    bbox: BBox,
    #[serde(default)]
    ignore: bool,
}

/// Parse an annotation file into a [`Dataset`].
///
/// Hard guarantees on success: image and annotation ids are unique, every
/// `image_id` resolves, all image dimensions and box extents are positive,
/// and input order is preserved. Unknown JSON fields are ignored.
pub fn parse_annotations(raw: &[u8]) -> Result<Dataset, DatasetError> {
    let text = std::str::from_utf8(raw)?;
    let parsed: RawDataset = match serde_json::from_str(text) {
        Ok(d) => d,
        Err(e) => return Err(json_error(e, text)),
    };

    let mut image_ids = HashSet::with_capacity(parsed.images.len());
    let mut images = Vec::with_capacity(parsed.images.len());
    for im in parsed.images {
        if im.width <= 0 || im.height <= 0 {
            return Err(DatasetError::BadImageDims {
                image_id: im.id,
                width: im.width,
                height: im.height,
            });
        }
        if !image_ids.insert(im.id) {
            return Err(DatasetError::DuplicateImageId(im.id));
        }
        images.push(ImageRecord {
            id: im.id,
            width: im.width as u32,
            height: im.height as u32,
            file_name: im.file_name,
        });
    }

    let mut ann_ids = HashSet::with_capacity(parsed.annotations.len());
    let mut annotations = Vec::with_capacity(parsed.annotations.len());
    for ann in parsed.annotations {
        if !ann_ids.insert(ann.id) {
            return Err(DatasetError::DuplicateAnnotationId(ann.id));
        }
        if !ann.bbox.is_valid() {
            return Err(DatasetError::BadBBox {
                annotation_id: ann.id,
                w: ann.bbox.w,
                h: ann.bbox.h,
            });
        }
        if !image_ids.contains(&ann.image_id) {
            return Err(DatasetError::MissingImage {
                annotation_id: ann.id,
                image_id: ann.image_id,
            });
        }
        annotations.push(Annotation {
            id: ann.id,
            image_id: ann.image_id,
            bbox: ann.bbox,
            ignore: ann.ignore,
        });
    }

    Ok(Dataset {
        images,
        annotations,
    })
}

fn json_error(err: serde_json::Error, text: &str) -> DatasetError {
    use serde_json::error::Category;
    match err.classify() {
        Category::Syntax | Category::Eof => DatasetError::Parse {
            offset: byte_offset(text, err.line(), err.column()),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        },
        _ => DatasetError::Schema {
            message: err.to_string(),
        },
    }
}

/// Byte position of 1-based (line, column) in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Keep only images whose non-ignore annotation count is strictly below
/// `max_objects`, along with their annotations. The input is unmodified.
pub fn filter_images(d: &Dataset, max_objects: NonZeroUsize) -> Dataset {
    let counts = d.gt_counts_by_image();
    let keep: HashSet<i64> = d
        .images
        .iter()
        .filter(|im| counts.get(&im.id).copied().unwrap_or(0) < max_objects.get())
        .map(|im| im.id)
        .collect();
    Dataset {
        images: d
            .images
            .iter()
            .filter(|im| keep.contains(&im.id))
            .cloned()
            .collect(),
        annotations: d
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.image_id))
            .cloned()
            .collect(),
    }
}

/// Severity of a validation finding. `Hard` findings make the dataset
/// unusable for statistics; `Soft` findings are reported and tolerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

/// All findings over a dataset; `is_valid` means no hard findings.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.hard_count() == 0
    }

    pub fn hard_count(&self) -> usize {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Hard)
            .count()
    }

    pub fn soft_count(&self) -> usize {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Soft)
            .count()
    }

    fn hard(&mut self, message: String) {
        self.findings.push(Finding {
            severity: Severity::Hard,
            message,
        });
    }

    fn soft(&mut self, message: String) {
        self.findings.push(Finding {
            severity: Severity::Soft,
            message,
        });
    }
}

/// Check a dataset without rejecting it: referential integrity and positive
/// dimensions are hard findings; boxes escaping the 10%-padded image frame or
/// collapsing to zero area when clamped to the image are soft warnings.
pub fn validate(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut image_by_id: HashMap<i64, &ImageRecord> = HashMap::with_capacity(d.images.len());
    let mut seen_images = HashSet::with_capacity(d.images.len());
    for im in &d.images {
        if !seen_images.insert(im.id) {
            report.hard(format!("duplicate image id {}", im.id));
        }
        if im.width == 0 || im.height == 0 {
            report.hard(format!(
                "image {} has non-positive dimensions {}x{}",
                im.id, im.width, im.height
            ));
        }
        image_by_id.insert(im.id, im);
    }

    let mut seen_anns = HashSet::with_capacity(d.annotations.len());
    for ann in &d.annotations {
        if !seen_anns.insert(ann.id) {
            report.hard(format!("duplicate annotation id {}", ann.id));
        }
        if !ann.bbox.is_valid() {
            report.hard(format!(
                "annotation {} has a degenerate bbox (w={}, h={})",
                ann.id, ann.bbox.w, ann.bbox.h
            ));
            continue;
        }
        let Some(im) = image_by_id.get(&ann.image_id) else {
            report.hard(format!(
                "annotation {} references missing image {}",
                ann.id, ann.image_id
            ));
            continue;
        };

        let (w, h) = (f64::from(im.width), f64::from(im.height));
        let (pad_x, pad_y) = (FRAME_PAD_FRACTION * w, FRAME_PAD_FRACTION * h);
        let b = ann.bbox;
        if b.x < -pad_x || b.y < -pad_y || b.right() > w + pad_x || b.bottom() > h + pad_y {
            report.soft(format!(
                "annotation {} bbox [{}, {}, {}, {}] escapes the padded frame of image {}",
                ann.id, b.x, b.y, b.w, b.h, ann.image_id
            ));
        }
        let clamped_w = b.right().min(w) - b.x.max(0.0);
        let clamped_h = b.bottom().min(h) - b.y.max(0.0);
        if clamped_w <= 0.0 || clamped_h <= 0.0 {
            report.soft(format!(
                "annotation {} has zero area after clamping to image {}",
                ann.id, ann.image_id
            ));
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: i64, w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id,
            width: w,
            height: h,
            file_name: None,
        }
    }

    fn ann(id: i64, image_id: i64, bbox: BBox) -> Annotation {
        Annotation {
            id,
            image_id,
            bbox,
            ignore: false,
        }
    }

    #[test]
    fn parses_empty_dataset() {
        let d = parse_annotations(br#"{"images":[],"annotations":[]}"#).unwrap();
        assert!(d.images.is_empty());
        assert!(d.annotations.is_empty());
    }

    #[test]
    fn parses_minimal_dataset() {
        let d = parse_annotations(
            br#"{"images":[{"id":1,"width":640,"height":512}],
                 "annotations":[{"id":1,"image_id":1,"bbox":[10,10,16,16]}]}"#,
        )
        .unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.annotations.len(), 1);
        assert_eq!(d.annotations[0].bbox, BBox::new(10.0, 10.0, 16.0, 16.0));
        assert!(!d.annotations[0].ignore);
        assert_eq!(d.annotations[0].image_id, d.images[0].id);
    }

    #[test]
    fn missing_image_reference_names_annotation() {
        let err = parse_annotations(
            br#"{"images":[],"annotations":[{"id":7,"image_id":99,"bbox":[0,0,1,1]}]}"#,
        )
        .unwrap_err();
        match err {
            DatasetError::MissingImage {
                annotation_id,
                image_id,
            } => {
                assert_eq!(annotation_id, 7);
                assert_eq!(image_id, 99);
            }
            other => panic!("expected MissingImage, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let raw = b"{\"images\":[],\n\"annotations\":[}";
        let err = parse_annotations(raw).unwrap_err();
        match err {
            DatasetError::Parse { offset, line, .. } => {
                assert_eq!(line, 2);
                assert_eq!(raw[offset], b'}');
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_schema_error_naming_field() {
        let err =
            parse_annotations(br#"{"images":[{"id":1,"width":32}],"annotations":[]}"#).unwrap_err();
        match err {
            DatasetError::Schema { message } => assert!(message.contains("height"), "{message}"),
            other => panic!("expected Schema, got {other:?}"),
        }
    }

    #[test]
    fn missing_top_level_key_is_schema_error() {
        let err = parse_annotations(br#"{"images":[]}"#).unwrap_err();
        match err {
            DatasetError::Schema { message } => {
                assert!(message.contains("annotations"), "{message}")
            }
            other => panic!("expected Schema, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_bbox_names_record() {
        let err = parse_annotations(
            br#"{"images":[{"id":1,"width":64,"height":64}],
                 "annotations":[{"id":3,"image_id":1,"bbox":[0,0,0,5]}]}"#,
        )
        .unwrap_err();
        match err {
            DatasetError::BadBBox { annotation_id, .. } => assert_eq!(annotation_id, 3),
            other => panic!("expected BadBBox, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_image_dims_names_record() {
        let err = parse_annotations(
            br#"{"images":[{"id":4,"width":-1,"height":64}],"annotations":[]}"#,
        )
        .unwrap_err();
        match err {
            DatasetError::BadImageDims { image_id, .. } => assert_eq!(image_id, 4),
            other => panic!("expected BadImageDims, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse_annotations(
            br#"{"images":[{"id":1,"width":8,"height":8},{"id":1,"width":8,"height":8}],
                 "annotations":[]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateImageId(1)));

        let err = parse_annotations(
            br#"{"images":[{"id":1,"width":8,"height":8}],
                 "annotations":[{"id":2,"image_id":1,"bbox":[0,0,1,1]},
                                {"id":2,"image_id":1,"bbox":[1,1,1,1]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateAnnotationId(2)));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let d = parse_annotations(
            br#"{"images":[{"id":1,"width":8,"height":8,"license":3}],
                 "annotations":[{"id":1,"image_id":1,"bbox":[0,0,1,1],"area":1.0}],
                 "categories":[{"id":1,"name":"person"}]}"#,
        )
        .unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.annotations.len(), 1);
    }

    fn dataset_with_box_counts(counts: &[usize]) -> Dataset {
        let mut d = Dataset::default();
        let mut next_ann = 1;
        for (i, &n) in counts.iter().enumerate() {
            let id = i as i64 + 1;
            d.images.push(image(id, 640, 512));
            for _ in 0..n {
                d.annotations
                    .push(ann(next_ann, id, BBox::new(0.0, 0.0, 4.0, 4.0)));
                next_ann += 1;
            }
        }
        d
    }

    #[test]
    fn filter_keeps_images_strictly_below_threshold() {
        let d = dataset_with_box_counts(&[150, 250]);
        let filtered = filter_images(&d, NonZeroUsize::new(200).unwrap());
        assert_eq!(filtered.images.len(), 1);
        assert_eq!(filtered.images[0].id, 1);
        assert_eq!(filtered.annotations.len(), 150);

        // Exactly at the threshold is excluded.
        let d = dataset_with_box_counts(&[200]);
        assert!(filter_images(&d, NonZeroUsize::new(200).unwrap())
            .images
            .is_empty());
    }

    #[test]
    fn filter_threshold_one_keeps_only_empty_images() {
        let mut d = dataset_with_box_counts(&[3]);
        d.images.push(image(99, 64, 64));
        let filtered = filter_images(&d, NonZeroUsize::new(1).unwrap());
        assert_eq!(filtered.images.len(), 1);
        assert_eq!(filtered.images[0].id, 99);
        assert!(filtered.annotations.is_empty());
    }

    #[test]
    fn filter_on_empty_dataset_is_empty() {
        let d = Dataset::default();
        let filtered = filter_images(&d, NonZeroUsize::new(200).unwrap());
        assert_eq!(filtered, Dataset::default());
    }

    #[test]
    fn filter_counts_only_non_ignore_boxes() {
        let mut d = dataset_with_box_counts(&[2]);
        d.annotations[0].ignore = true;
        // 1 real + 1 ignore: survives max_objects = 2, and the ignore
        // annotation is carried along with its image.
        let filtered = filter_images(&d, NonZeroUsize::new(2).unwrap());
        assert_eq!(filtered.images.len(), 1);
        assert_eq!(filtered.annotations.len(), 2);
    }

    #[test]
    fn validate_clean_dataset() {
        let d = dataset_with_box_counts(&[2, 3]);
        let report = validate(&d);
        assert!(report.is_valid());
        assert!(report.findings.is_empty());
    }

    #[test]
    fn validate_flags_zero_width_box_as_hard() {
        let mut d = dataset_with_box_counts(&[1]);
        d.annotations[0].bbox.w = 0.0;
        let report = validate(&d);
        assert!(!report.is_valid());
        assert_eq!(report.hard_count(), 1);
    }

    #[test]
    fn validate_soft_warns_box_past_padded_frame() {
        // 40x40 image pads to 4 px; 5 px past the edge is outside.
        let mut d = Dataset {
            images: vec![image(1, 40, 40)],
            annotations: vec![ann(1, 1, BBox::new(25.0, 10.0, 20.0, 10.0))],
        };
        let report = validate(&d);
        assert!(report.is_valid());
        assert_eq!(report.soft_count(), 1);

        // 5 px past a 640-wide image stays inside the 64 px pad: no warning.
        d.images[0] = image(1, 640, 40);
        d.annotations[0].bbox = BBox::new(625.0, 10.0, 20.0, 10.0);
        let report = validate(&d);
        assert_eq!(report.soft_count(), 0);
    }

    #[test]
    fn validate_soft_warns_zero_area_after_clamping() {
        let d = Dataset {
            images: vec![image(1, 40, 40)],
            annotations: vec![ann(1, 1, BBox::new(200.0, 200.0, 5.0, 5.0))],
        };
        let report = validate(&d);
        assert!(report.is_valid());
        // Far outside: both the frame warning and the clamp warning fire.
        assert_eq!(report.soft_count(), 2);
    }

    #[test]
    fn json_round_trip_preserves_dataset() {
        let d = parse_annotations(
            br#"{"images":[{"id":1,"width":64,"height":48,"file_name":"a.jpg"},
                           {"id":2,"width":32,"height":32}],
                 "annotations":[{"id":1,"image_id":1,"bbox":[1.5,2.25,3.125,4.0]},
                                {"id":2,"image_id":2,"bbox":[0,0,1,1],"ignore":true}]}"#,
        )
        .unwrap();
        let back = parse_annotations(d.to_json().as_bytes()).unwrap();
        assert_eq!(d, back);
    }
}
