//! Remote-sensing detection datasets for vision-language instruction tuning.
//!
//! The crate covers the whole loop around a detection-capable VLM:
//!
//! - [`annotation`] reads VOC XML, COCO JSON and NWPU-VHR-10 text labels into
//!   [`annotation::ImageRecord`]s.
//! - [`instruct`] renders prompts, serializes ground truth into the
//!   `[{"bbox_2d": [x1, y1, x2, y2], "label": ...}]` response schema, splits
//!   and resizes, and writes JSONL.
//! - [`parser`] pulls that JSON back out of free-text model responses.
//! - [`eval`] scores parsed responses with precision, recall and F1 at an IoU
//!   threshold.
//! - [`lora`] is a small dense-matrix model of the low-rank adapter update and
//!   embedding-noise injection used during fine-tuning.

pub mod annotation;
pub mod eval;
pub mod geometry;
pub mod instruct;
pub mod lora;
pub mod parser;

pub use annotation::{DatasetManifest, Detection, ImageRecord, Modality, Split};
pub use eval::{EvalReport, FailurePolicy};
pub use geometry::{iou, BBox, Dims};
pub use instruct::{InstructSample, SplitSpec};
pub use parser::{extract_json, lenient_extract, ParseFailure, ParseOutcome};
