//! Instruction-tuning samples: prompts, JSON responses, splits and JSONL.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::annotation::{DatasetManifest, Detection, ImageRecord, Modality, Split};
use crate::geometry::{rescale_bbox, Dims, GeometryError};
use crate::lora::TrainConfig;

pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Square input size fed to the model; 644 = 23 × 28.
pub const DEFAULT_TARGET: Dims = Dims {
    width: 644,
    height: 644,
};

const PROMPT_HEAD: &str = "You are an expert in various visual tasks.";
const PROMPT_TAIL: &str = "Please identify their locations and output the coordinates in JSON format.";
const SAR_SUBJECT: &str = "This SAR image contains multiple ships.";
const OPTICAL_SUBJECT: &str = "This remote sensing image contains multiple objects.";

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("record {0} has no declared split but official splitting was requested")]
    MissingOfficialSplit(String),
    #[error("invalid split ratio {0}: must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("record {image_id}: {source}")]
    Geometry {
        image_id: String,
        source: GeometryError,
    },
}

/// One JSONL line. Field order is alphabetical so serde output is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructSample {
    pub id: String,
    pub image: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Official,
    Random,
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "official" => Ok(SplitMode::Official),
            "random" => Ok(SplitMode::Random),
            other => Err(format!("unknown split mode {other:?} (expected official or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Fraction of records assigned to train.
    pub ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn official() -> Self {
        Self {
            mode: SplitMode::Official,
            ratio: 0.8,
            seed: 0,
        }
    }

    pub fn random(ratio: f64, seed: u64) -> Result<Self, BuildError> {
        let spec = Self {
            mode: SplitMode::Random,
            ratio,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), BuildError> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(BuildError::InvalidRatio(self.ratio));
        }
        Ok(())
    }
}

pub fn render_prompt(modality: Modality) -> String {
    let subject = match modality {
        Modality::Sar => SAR_SUBJECT,
        Modality::Optical => OPTICAL_SUBJECT,
    };
    format!("{PROMPT_HEAD} {subject} {PROMPT_TAIL} {IMAGE_PLACEHOLDER}")
}

/// Compact JSON response in reading order (top to bottom, then left to
/// right; the sort is stable so exact ties keep their input order).
pub fn serialize_response(detections: &[Detection]) -> String {
    let mut ordered: Vec<&Detection> = detections.iter().collect();
    ordered.sort_by(|a, b| {
        a.bbox
            .y1()
            .total_cmp(&b.bbox.y1())
            .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
    });
    serde_json::to_string(&ordered).expect("detections serialize")
}

/// Number of train records for `n` records at `ratio`: ⌈ratio·n⌉, with
/// products within 1e-9 of an integer taken as that integer so that float
/// noise in e.g. `0.8 * 650` cannot push the count to 521.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let exact = ratio * n as f64;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() < 1e-9 {
        nearest
    } else {
        exact.ceil()
    };
    (count as usize).min(n)
}

/// Seeded random partition.
///
/// Records are first ordered by `image_id`, then shuffled with ChaCha8
/// (`rand_chacha`) seeded from `spec.seed` via `seed_from_u64`, using
/// `rand`'s Fisher–Yates `shuffle`. The first [`train_count`] shuffled ids go
/// to train. Both halves are returned in the input order.
pub fn split_random(records: &[ImageRecord], spec: &SplitSpec) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), BuildError> {
    spec.check()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let mut in_train = vec![false; records.len()];
    for &i in &order[..train_count(records.len(), spec.ratio)] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(&in_train)
        .partition(|(_, &t)| t);
    Ok((
        train.into_iter().map(|(r, _)| r.clone()).collect(),
        test.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}

fn split_official(records: &[ImageRecord]) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), BuildError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        match r.split {
            Split::Train => train.push(r.clone()),
            Split::Test => test.push(r.clone()),
            Split::Unsplit => return Err(BuildError::MissingOfficialSplit(r.image_id.clone())),
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SplitStats {
    pub samples: usize,
    pub boxes: usize,
    pub dropped_boxes: usize,
    pub per_class: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub dataset: String,
    pub modality: Modality,
    pub prompt: String,
    pub split: SplitSpec,
    pub target: Dims,
    pub train: SplitStats,
    pub test: SplitStats,
    pub train_config: TrainConfig,
}

impl BuildReport {
    /// Canonical JSON document (sorted keys, pretty, trailing newline).
    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value["dropped_boxes"] = json!(self.train.dropped_boxes + self.test.dropped_boxes);
        value["samples"] = json!(self.train.samples + self.test.samples);
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub train: Vec<InstructSample>,
    pub test: Vec<InstructSample>,
    pub report: BuildReport,
}

impl BuiltDataset {
    pub fn train_jsonl(&self) -> String {
        to_jsonl(&self.train)
    }

    pub fn test_jsonl(&self) -> String {
        to_jsonl(&self.test)
    }
}

/// One compact JSON object per line, LF terminated.
pub fn to_jsonl(samples: &[InstructSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL; blank lines are skipped. Errors carry the 1-based line.
pub fn from_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Rescales one record's boxes to `target`, dropping boxes that collapse.
pub fn to_sample(record: &ImageRecord, modality: Modality, target: Dims, stats: &mut SplitStats) -> Result<InstructSample, BuildError> {
    let mut kept = Vec::with_capacity(record.detections.len());
    for det in &record.detections {
        match rescale_bbox(&det.bbox, record.dims, target) {
            Ok(bbox) => {
                *stats.per_class.entry(det.label.clone()).or_default() += 1;
                kept.push(Detection::new(bbox, det.label.clone()));
            }
            Err(GeometryError::DegenerateBox(b)) => {
                log::warn!(
                    "{}: dropping {} box {} (collapses to {} at {})",
                    record.image_id,
                    det.label,
                    det.bbox,
                    b,
                    target
                );
                stats.dropped_boxes += 1;
            }
            Err(source) => {
                return Err(BuildError::Geometry {
                    image_id: record.image_id.clone(),
                    source,
                })
            }
        }
    }
    stats.samples += 1;
    stats.boxes += kept.len();
    Ok(InstructSample {
        id: record.image_id.clone(),
        image: record.image_path.clone(),
        prompt: render_prompt(modality),
        response: serialize_response(&kept),
    })
}

/// Splits the manifest and renders both halves at `target` resolution.
pub fn build_dataset(manifest: &DatasetManifest, spec: &SplitSpec, target: Dims, train_config: TrainConfig) -> Result<BuiltDataset, BuildError> {
    let (train_recs, test_recs) = match spec.mode {
        SplitMode::Official => split_official(&manifest.records)?,
        SplitMode::Random => split_random(&manifest.records, spec)?,
    };
    let render = |records: &[ImageRecord]| -> Result<(Vec<InstructSample>, SplitStats), BuildError> {
        let mut stats = SplitStats::default();
        let samples = records
            .iter()
            .map(|r| to_sample(r, manifest.modality, target, &mut stats))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((samples, stats))
    };
    let (train, train_stats) = render(&train_recs)?;
    let (test, test_stats) = render(&test_recs)?;
    Ok(BuiltDataset {
        train,
        test,
        report: BuildReport {
            dataset: manifest.name.clone(),
            modality: manifest.modality,
            prompt: render_prompt(manifest.modality),
            split: *spec,
            target,
            train: train_stats,
            test: test_stats,
            train_config,
        },
    })
}
