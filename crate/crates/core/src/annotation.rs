//! Readers for the source annotation formats.
//!
//! All three readers produce the same [`ImageRecord`] shape. Ingest is strict:
//! inverted boxes, boxes outside the image and unknown category ids are errors,
//! never silently clamped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Dims};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("malformed annotation: {0}")]
    Malformed(String),
    #[error("unknown category id {0}")]
    UnknownCategoryId(i64),
}

fn malformed(msg: impl Into<String>) -> AnnotationError {
    AnnotationError::Malformed(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "SAR")]
    Sar,
    #[serde(rename = "optical")]
    Optical,
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sar" => Ok(Modality::Sar),
            "optical" => Ok(Modality::Optical),
            other => Err(format!("unknown modality {other:?} (expected sar or optical)")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Sar => "SAR",
            Modality::Optical => "optical",
        })
    }
}

/// Split membership declared by the source dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unsplit,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unsplit" => Ok(Split::Unsplit),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One labelled object. Serializes in the response schema:
/// `{"bbox_2d":[x1,y1,x2,y2],"label":"ship"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox_2d")]
    pub bbox: BBox,
    pub label: String,
}

impl Detection {
    pub fn new(bbox: BBox, label: impl Into<String>) -> Self {
        Self {
            bbox,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_path: String,
    pub dims: Dims,
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub split: Split,
}

impl ImageRecord {
    /// Builds a record, checking that every detection lies inside `dims`.
    pub fn new(
        image_id: impl Into<String>,
        image_path: impl Into<String>,
        dims: Dims,
        detections: Vec<Detection>,
    ) -> Result<Self, AnnotationError> {
        let record = Self {
            image_id: image_id.into(),
            image_path: image_path.into(),
            dims,
            detections,
            split: Split::Unsplit,
        };
        record.check()?;
        Ok(record)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn check(&self) -> Result<(), AnnotationError> {
        if self.image_id.is_empty() {
            return Err(malformed("empty image id"));
        }
        if self.dims.width == 0 || self.dims.height == 0 {
            return Err(malformed(format!("{}: zero image size", self.image_id)));
        }
        for det in &self.detections {
            if det.label.trim().is_empty() {
                return Err(malformed(format!("{}: empty label", self.image_id)));
            }
            if !det.bbox.within(self.dims) {
                return Err(malformed(format!(
                    "{}: box {} exceeds image size {}",
                    self.image_id, det.bbox, self.dims
                )));
            }
        }
        Ok(())
    }
}

/// A converted dataset: every record plus the metadata the builder needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub modality: Modality,
    pub categories: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Assembles a manifest. When `categories` is empty the category set is
    /// the sorted set of labels present.
    pub fn new(
        name: impl Into<String>,
        modality: Modality,
        categories: Vec<String>,
        records: Vec<ImageRecord>,
    ) -> Result<Self, AnnotationError> {
        let categories = if categories.is_empty() {
            records
                .iter()
                .flat_map(|r| r.detections.iter().map(|d| d.label.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            categories
        };
        let manifest = Self {
            name: name.into(),
            modality,
            categories,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        let known: HashSet<&str> = self.categories.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for record in &self.records {
            record.check()?;
            if !seen.insert(record.image_id.as_str()) {
                return Err(malformed(format!("duplicate image id {}", record.image_id)));
            }
            if let Some(det) = record.detections.iter().find(|d| !known.contains(d.label.as_str())) {
                return Err(malformed(format!(
                    "{}: label {:?} not in category set",
                    record.image_id, det.label
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        let manifest: Self = serde_json::from_str(text).map_err(|e| malformed(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Canonical JSON: sorted keys, compact, trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut out = serde_json::to_string(&value).expect("value serializes");
        out.push('\n');
        out
    }
}

fn normalize_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

fn file_stem(name: &str) -> &str {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    }
}

fn bbox_or_malformed(ctx: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox, AnnotationError> {
    BBox::new(x1, y1, x2, y2).map_err(|e| malformed(format!("{ctx}: {e}")))
}

// ---------------------------------------------------------------------------
// VOC XML

/// Parses one Pascal-VOC style XML document (SSDD ships this layout).
///
/// The image id is the stem of `<filename>`, or `fallback_id` when the
/// element is absent.
pub fn parse_voc_xml(doc: &[u8], fallback_id: &str) -> Result<ImageRecord, AnnotationError> {
    let text = std::str::from_utf8(doc).map_err(|e| malformed(format!("not UTF-8: {e}")))?;
    let xml = roxmltree::Document::parse(text).map_err(|e| malformed(format!("xml: {e}")))?;
    let root = xml.root_element();

    fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
        node.children().find(|c| c.is_element() && c.has_tag_name(tag))
    }
    fn text_of<'a>(node: roxmltree::Node<'a, '_>, tag: &str) -> Option<&'a str> {
        child(node, tag)
            .and_then(|c| c.text())
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }
    fn number(node: roxmltree::Node<'_, '_>, tag: &str, ctx: &str) -> Result<f64, AnnotationError> {
        let raw = text_of(node, tag).ok_or_else(|| malformed(format!("{ctx}: missing <{tag}>")))?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| malformed(format!("{ctx}: <{tag}> is not a number: {raw:?}")))
    }

    let filename = text_of(root, "filename");
    let image_id = filename.map(file_stem).unwrap_or(fallback_id).to_string();
    let image_path = filename.map(str::to_string).unwrap_or_else(|| format!("{image_id}.jpg"));

    let size = child(root, "size").ok_or_else(|| malformed(format!("{image_id}: missing <size>")))?;
    let width = number(size, "width", &image_id)?;
    let height = number(size, "height", &image_id)?;
    if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 {
        return Err(malformed(format!("{image_id}: bad image size {width}x{height}")));
    }
    let dims = Dims::new(width as u32, height as u32).map_err(|e| malformed(e.to_string()))?;

    let mut detections = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let ctx = format!("{image_id} object #{i}");
        let label = text_of(obj, "name").ok_or_else(|| malformed(format!("{ctx}: missing <name>")))?;
        let bnd = child(obj, "bndbox").ok_or_else(|| malformed(format!("{ctx}: missing <bndbox>")))?;
        let bbox = bbox_or_malformed(
            &ctx,
            number(bnd, "xmin", &ctx)?,
            number(bnd, "ymin", &ctx)?,
            number(bnd, "xmax", &ctx)?,
            number(bnd, "ymax", &ctx)?,
        )?;
        detections.push(Detection::new(bbox, normalize_label(label)));
    }
    ImageRecord::new(image_id, image_path, dims, detections)
}

// ---------------------------------------------------------------------------
// COCO JSON

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

/// Parses a COCO-style detection file (HRSID ships this layout).
///
/// Returns one record per entry of `images[]`, in file order, with
/// `[x, y, w, h]` boxes converted to corners and detections ordered by
/// annotation id.
pub fn parse_coco(doc: &[u8]) -> Result<Vec<ImageRecord>, AnnotationError> {
    let coco: CocoDoc = serde_json::from_slice(doc).map_err(|e| malformed(format!("coco json: {e}")))?;
    let categories: BTreeMap<i64, String> = coco
        .categories
        .iter()
        .map(|c| (c.id, normalize_label(&c.name)))
        .collect();

    let mut by_image: BTreeMap<i64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for ann in &coco.annotations {
        by_image.entry(ann.image_id).or_default().push(ann);
    }
    let known_images: HashSet<i64> = coco.images.iter().map(|i| i.id).collect();
    if let Some(orphan) = by_image.keys().find(|id| !known_images.contains(id)) {
        return Err(malformed(format!("annotation refers to unknown image id {orphan}")));
    }

    let mut records = Vec::with_capacity(coco.images.len());
    for image in &coco.images {
        let image_id = file_stem(&image.file_name).to_string();
        let dims = Dims::new(image.width, image.height)
            .map_err(|e| malformed(format!("{image_id}: {e}")))?;
        let mut anns = by_image.remove(&image.id).unwrap_or_default();
        anns.sort_by_key(|a| a.id);
        let mut detections = Vec::with_capacity(anns.len());
        for ann in anns {
            let label = categories
                .get(&ann.category_id)
                .ok_or(AnnotationError::UnknownCategoryId(ann.category_id))?;
            let [x, y, w, h] = ann.bbox;
            let ctx = format!("{image_id} annotation {}", ann.id);
            detections.push(Detection::new(bbox_or_malformed(&ctx, x, y, x + w, y + h)?, label.clone()));
        }
        records.push(ImageRecord::new(image_id, image.file_name.clone(), dims, detections)?);
    }
    Ok(records)
}

/// Category names of a COCO file in category-id order.
pub fn coco_categories(doc: &[u8]) -> Result<Vec<String>, AnnotationError> {
    let coco: CocoDoc = serde_json::from_slice(doc).map_err(|e| malformed(format!("coco json: {e}")))?;
    let mut cats: Vec<_> = coco.categories.into_iter().map(|c| (c.id, normalize_label(&c.name))).collect();
    cats.sort();
    Ok(cats.into_iter().map(|(_, n)| n).collect())
}

/// Inverse of the corner conversion: `[x1, y1, x2, y2]` → `[x, y, w, h]`.
pub fn to_coco_xywh(b: &BBox) -> [f64; 4] {
    [b.x1(), b.y1(), b.width(), b.height()]
}

// ---------------------------------------------------------------------------
// NWPU-VHR-10 text

pub type ClassMap = BTreeMap<u32, String>;

/// NWPU-VHR-10 class ids 1..=10.
pub fn nwpu_class_map() -> ClassMap {
    [
        "airplane",
        "ship",
        "storage tank",
        "baseball diamond",
        "tennis court",
        "basketball court",
        "ground track field",
        "harbor",
        "bridge",
        "vehicle",
    ]
    .into_iter()
    .enumerate()
    .map(|(i, name)| (i as u32 + 1, name.to_string()))
    .collect()
}

static NWPU_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\((\d+),(\d+)\),\((\d+),(\d+)\),(\d+)$").expect("valid regex"));

/// Parses an NWPU-VHR-10 ground-truth file: one `(x1,y1),(x2,y2),class`
/// line per object. Blank lines are skipped; CRLF and surrounding
/// whitespace are accepted.
pub fn parse_nwpu_txt(doc: &[u8], classes: &ClassMap) -> Result<Vec<Detection>, AnnotationError> {
    let text = std::str::from_utf8(doc).map_err(|e| malformed(format!("not UTF-8: {e}")))?;
    let mut detections = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let caps = NWPU_LINE.captures(line).ok_or_else(|| {
            malformed(format!(
                "line {}: expected \"(x1,y1),(x2,y2),class\", got {line:?}",
                lineno + 1
            ))
        })?;
        let num = |i: usize| -> Result<u64, AnnotationError> {
            caps[i]
                .parse::<u64>()
                .map_err(|e| malformed(format!("line {}: {e}", lineno + 1)))
        };
        let class_id = num(5)?;
        let label = u32::try_from(class_id)
            .ok()
            .and_then(|id| classes.get(&id))
            .ok_or(AnnotationError::UnknownCategoryId(class_id as i64))?;
        let ctx = format!("line {}", lineno + 1);
        let bbox = bbox_or_malformed(&ctx, num(1)? as f64, num(2)? as f64, num(3)? as f64, num(4)? as f64)?;
        detections.push(Detection::new(bbox, label.clone()));
    }
    Ok(detections)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voc(objects: &str) -> String {
        format!(
            "<annotation><filename>000123.jpg</filename>\
             <size><width>100</width><height>100</height><depth>1</depth></size>{objects}</annotation>"
        )
    }

    fn object(name: &str, b: [i32; 4]) -> String {
        format!(
            "<object><name>{name}</name><difficult>0</difficult><bndbox><xmin>{}</xmin><ymin>{}</ymin>\
             <xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
            b[0], b[1], b[2], b[3]
        )
    }

    #[test]
    fn voc_single_object() {
        let rec = parse_voc_xml(voc(&object("ship", [10, 20, 50, 60])).as_bytes(), "x").unwrap();
        assert_eq!(rec.image_id, "000123");
        assert_eq!(rec.image_path, "000123.jpg");
        assert_eq!(rec.dims, Dims::new(100, 100).unwrap());
        assert_eq!(rec.detections.len(), 1);
        assert_eq!(rec.detections[0].bbox.to_array(), [10., 20., 50., 60.]);
        assert_eq!(rec.detections[0].label, "ship");
    }

    #[test]
    fn voc_empty_and_order() {
        let rec = parse_voc_xml(voc("").as_bytes(), "x").unwrap();
        assert!(rec.detections.is_empty());

        let two = format!("{}{}", object("ship", [50, 50, 60, 60]), object("Ship", [1, 1, 5, 5]));
        let rec = parse_voc_xml(voc(&two).as_bytes(), "x").unwrap();
        assert_eq!(rec.detections[0].bbox.x1(), 50.0);
        assert_eq!(rec.detections[1].label, "ship");
    }

    #[test]
    fn voc_errors() {
        let inverted = voc(&object("ship", [60, 20, 50, 60]));
        assert!(matches!(parse_voc_xml(inverted.as_bytes(), "x"), Err(AnnotationError::Malformed(_))));
        let outside = voc(&object("ship", [60, 20, 150, 60]));
        assert!(parse_voc_xml(outside.as_bytes(), "x").is_err());
        let nan = voc("<object><name>ship</name><bndbox><xmin>a</xmin><ymin>1</ymin><xmax>2</xmax><ymax>3</ymax></bndbox></object>");
        assert!(parse_voc_xml(nan.as_bytes(), "x").is_err());
        let no_size = "<annotation><object/></annotation>";
        assert!(parse_voc_xml(no_size.as_bytes(), "x").is_err());
        assert!(parse_voc_xml(b"<annotation>", "x").is_err());
    }

    #[test]
    fn voc_fallback_id() {
        let doc = "<annotation><size><width>10</width><height>10</height></size></annotation>";
        let rec = parse_voc_xml(doc.as_bytes(), "abc").unwrap();
        assert_eq!(rec.image_id, "abc");
    }

    const COCO: &str = r#"{
        "images": [
            {"id": 7, "file_name": "P0001_0_800.png", "width": 800, "height": 800},
            {"id": 8, "file_name": "P0002.png", "width": 800, "height": 800}
        ],
        "annotations": [
            {"id": 12, "image_id": 7, "category_id": 1, "bbox": [100, 100, 5, 5], "area": 25, "iscrowd": 0},
            {"id": 3, "image_id": 7, "category_id": 1, "bbox": [10, 20, 40, 40]}
        ],
        "categories": [{"id": 1, "name": "ship"}]
    }"#;

    #[test]
    fn coco_grouping_and_conversion() {
        let recs = parse_coco(COCO.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].image_id, "P0001_0_800");
        // annotation-id order: id 3 before id 12
        assert_eq!(recs[0].detections[0].bbox.to_array(), [10., 20., 50., 60.]);
        assert_eq!(recs[0].detections[1].bbox.to_array(), [100., 100., 105., 105.]);
        assert!(recs[1].detections.is_empty());
    }

    #[test]
    fn coco_unknown_category() {
        let doc = COCO.replace("\"category_id\": 1, \"bbox\": [10", "\"category_id\": 9, \"bbox\": [10");
        assert_eq!(parse_coco(doc.as_bytes()), Err(AnnotationError::UnknownCategoryId(9)));
    }

    #[test]
    fn coco_bad_inputs() {
        let zero_w = COCO.replace("[10, 20, 40, 40]", "[10, 20, 0, 40]");
        assert!(matches!(parse_coco(zero_w.as_bytes()), Err(AnnotationError::Malformed(_))));
        let orphan = COCO.replace("\"image_id\": 7, \"category_id\": 1, \"bbox\": [10", "\"image_id\": 70, \"category_id\": 1, \"bbox\": [10");
        assert!(parse_coco(orphan.as_bytes()).is_err());
        assert!(parse_coco(b"{}").is_err());
        let empty = r#"{"images": [], "annotations": [], "categories": []}"#;
        assert!(parse_coco(empty.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn nwpu_lines() {
        let map = nwpu_class_map();
        let dets = parse_nwpu_txt(b"(563,478),(630,573),1\r\n\r\n  (5,5),(9,9),3  \n", &map).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox.to_array(), [563., 478., 630., 573.]);
        assert_eq!(dets[0].label, "airplane");
        assert_eq!(dets[1].label, "storage tank");
        assert!(parse_nwpu_txt(b"", &map).unwrap().is_empty());
    }

    #[test]
    fn nwpu_errors() {
        let map = nwpu_class_map();
        assert!(matches!(parse_nwpu_txt(b"(5,5),(4,9),2", &map), Err(AnnotationError::Malformed(_))));
        assert_eq!(parse_nwpu_txt(b"(1,1),(4,9),11", &map), Err(AnnotationError::UnknownCategoryId(11)));
        let err = parse_nwpu_txt(b"(1,1),(4,9),1\n(1;1),(4,9),1", &map).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn class_map_has_ten_classes() {
        let map = nwpu_class_map();
        assert_eq!(map.len(), 10);
        assert_eq!(map[&6], "basketball court");
        assert_eq!(map[&10], "vehicle");
    }

    #[test]
    fn manifest_validation_and_json() {
        let recs = parse_coco(COCO.as_bytes()).unwrap();
        let m = DatasetManifest::new("HRSID", Modality::Sar, vec![], recs.clone()).unwrap();
        assert_eq!(m.categories, vec!["ship".to_string()]);
        let back = DatasetManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);

        let mut dup = recs.clone();
        dup.push(recs[0].clone());
        assert!(DatasetManifest::new("x", Modality::Sar, vec![], dup).is_err());
        assert!(DatasetManifest::new("x", Modality::Sar, vec!["plane".into()], recs).is_err());
    }
}
