use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rand::SeedableRng;
use serde_json::{json, Value};

use rsdet_core::annotation::{
    coco_categories, nwpu_class_map, parse_coco, parse_nwpu_txt, parse_voc_xml, DatasetManifest, ImageRecord, Modality,
    Split,
};
use rsdet_core::eval::{dedup_last_wins, evaluate as score, FailurePolicy, Transcript, DEFAULT_IOU_THRESHOLD};
use rsdet_core::geometry::Dims;
use rsdet_core::instruct::{build_dataset, from_jsonl, InstructSample, SplitMode, SplitSpec, DEFAULT_TARGET};
use rsdet_core::lora::{check_equivalence, neftune_sample, LowRankAdapter, Matrix, NoiseSpec, TrainConfig};
use rsdet_core::parser::{extract_json, lenient_extract};

use crate::config::{parse_opt, pick, require, FileConfig};
use crate::{data, usage, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Voc,
    Coco,
    Nwpu,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "voc" => Ok(Format::Voc),
            "coco" => Ok(Format::Coco),
            "nwpu" => Ok(Format::Nwpu),
            other => Err(format!("unknown format {other:?} (expected voc, coco or nwpu)")),
        }
    }
}

/// Canonical JSON text: sorted keys, pretty-printed, trailing newline.
fn canonical(value: &impl serde::Serialize) -> String {
    let value = serde_json::to_value(value).expect("serializable");
    let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
    out.push('\n');
    out
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if !path.exists() {
        return Err(usage(format!("input {} does not exist", path.display())));
    }
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)
}

fn write_output(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(data)?;
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

/// Files under `path` with extension `ext`, sorted by name; a file path is
/// returned as-is.
fn list_files(path: &Path, ext: &str) -> Result<Vec<PathBuf>, Failure> {
    if !path.exists() {
        return Err(usage(format!("input {} does not exist", path.display())));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))
        .map_err(data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

const IMAGE_EXTENSIONS: [&str; 6] = ["jpg", "jpeg", "png", "bmp", "tif", "tiff"];

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().find_map(|ext| {
        let p = dir.join(format!("{stem}.{ext}"));
        p.is_file().then_some(p)
    })
}

// ---------------------------------------------------------------------------
// convert

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Annotation format: voc, coco or nwpu.
    #[arg(long)]
    format: Option<String>,
    /// Annotation file or directory without a declared split (repeatable).
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Annotation file or directory for the official train split (repeatable).
    #[arg(long)]
    train: Vec<PathBuf>,
    /// Annotation file or directory for the official test split (repeatable).
    #[arg(long)]
    test: Vec<PathBuf>,
    /// Image directory; nwpu reads image sizes from here.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Dataset name recorded in the manifest.
    #[arg(long)]
    name: Option<String>,
    /// sar or optical; defaults to optical for nwpu and sar otherwise.
    #[arg(long)]
    modality: Option<String>,
    /// Manifest output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn convert(args: ConvertArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let format: Format = require("format", parse_opt("format", pick(args.format, &cfg.format))?)?;
    let modality: Modality = parse_opt("modality", pick(args.modality, &cfg.modality))?.unwrap_or(match format {
        Format::Nwpu => Modality::Optical,
        Format::Voc | Format::Coco => Modality::Sar,
    });
    let out = require("out", pick(args.out, &cfg.out))?;
    let name = pick(args.name, &cfg.name).unwrap_or_else(|| "dataset".into());
    let images = pick(args.images, &cfg.images);

    let sources: Vec<(PathBuf, Split)> = args
        .input
        .into_iter()
        .map(|p| (p, Split::Unsplit))
        .chain(args.train.into_iter().map(|p| (p, Split::Train)))
        .chain(args.test.into_iter().map(|p| (p, Split::Test)))
        .collect();
    if sources.is_empty() {
        return Err(usage("no inputs: pass --input, --train or --test"));
    }
    if format == Format::Nwpu && images.is_none() {
        return Err(usage("nwpu needs --images to read image sizes"));
    }

    let mut records: Vec<ImageRecord> = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    let mut errors: Vec<String> = Vec::new();

    for (path, split) in &sources {
        match format {
            Format::Voc => {
                for file in list_files(path, "xml")? {
                    let parsed = fs::read(&file)
                        .map_err(|e| e.to_string())
                        .and_then(|bytes| parse_voc_xml(&bytes, &stem(&file)).map_err(|e| e.to_string()));
                    match parsed {
                        Ok(r) => records.push(r.with_split(*split)),
                        Err(e) => errors.push(format!("{}: {e}", file.display())),
                    }
                }
            }
            Format::Coco => {
                for file in list_files(path, "json")? {
                    let bytes = match fs::read(&file) {
                        Ok(b) => b,
                        Err(e) => {
                            errors.push(format!("{}: {e}", file.display()));
                            continue;
                        }
                    };
                    match parse_coco(&bytes).and_then(|r| Ok((r, coco_categories(&bytes)?))) {
                        Ok((recs, cats)) => {
                            if recs.is_empty() {
                                log::warn!("{}: no images", file.display());
                            }
                            for c in cats {
                                if !categories.contains(&c) {
                                    categories.push(c);
                                }
                            }
                            records.extend(recs.into_iter().map(|r| r.with_split(*split)));
                        }
                        Err(e) => errors.push(format!("{}: {e}", file.display())),
                    }
                }
            }
            Format::Nwpu => {
                let classes = nwpu_class_map();
                categories = classes.values().cloned().collect();
                let image_dir = images.as_deref().expect("checked above");
                for file in list_files(path, "txt")? {
                    let id = stem(&file);
                    let result = (|| -> Result<ImageRecord, String> {
                        let bytes = fs::read(&file).map_err(|e| e.to_string())?;
                        let detections = parse_nwpu_txt(&bytes, &classes).map_err(|e| e.to_string())?;
                        let image = find_image(image_dir, &id)
                            .ok_or_else(|| format!("no image named {id}.* in {}", image_dir.display()))?;
                        let size = imagesize::size(&image).map_err(|e| format!("{}: {e}", image.display()))?;
                        let dims = Dims::new(size.width as u32, size.height as u32).map_err(|e| e.to_string())?;
                        let image_name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                        ImageRecord::new(id.clone(), image_name, dims, detections).map_err(|e| e.to_string())
                    })();
                    match result {
                        Ok(r) => records.push(r.with_split(*split)),
                        Err(e) => errors.push(format!("{}: {e}", file.display())),
                    }
                }
            }
        }
    }

    if !errors.is_empty() {
        for e in &errors {
            eprintln!("{e}");
        }
        return Err(data(anyhow::anyhow!("{} annotation file(s) failed to parse", errors.len())));
    }
    if records.is_empty() {
        log::warn!("manifest has no records");
    }
    let manifest = DatasetManifest::new(name, modality, categories, records).map_err(data)?;
    write_output(&out, &manifest.to_json())?;
    eprintln!("wrote {} records to {}", manifest.records.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// build

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Manifest written by `convert`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// official or random; defaults to official when every record declares a split.
    #[arg(long)]
    split: Option<String>,
    /// Train fraction for random splits.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output image size, WIDTHxHEIGHT.
    #[arg(long)]
    target: Option<String>,
    /// Adapter rank recorded in the build report (8, 16 or 32).
    #[arg(long)]
    rank: Option<u32>,
    /// Output directory for train.jsonl, test.jsonl and build_report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn build(args: BuildArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let manifest_path = require("manifest", pick(args.manifest, &cfg.manifest))?;
    let out = require("out", pick(args.out, &cfg.out))?;
    let target: Dims = parse_opt("target", pick(args.target, &cfg.target))?.unwrap_or(DEFAULT_TARGET);
    let ratio = pick(args.ratio, &cfg.ratio).unwrap_or(0.8);
    let seed = pick(args.seed, &cfg.seed).unwrap_or(0);
    let train_config = match pick(args.rank, &cfg.rank) {
        Some(r) => TrainConfig::with_rank(r).map_err(|e| usage(format!("--rank: {e}")))?,
        None => TrainConfig::default(),
    };

    let manifest = DatasetManifest::from_json(&read_input(&manifest_path)?).map_err(data)?;
    let mode: SplitMode = match parse_opt("split", pick(args.split, &cfg.split))? {
        Some(m) => m,
        None if !manifest.records.is_empty() && manifest.records.iter().all(|r| r.split != Split::Unsplit) => {
            SplitMode::Official
        }
        None => SplitMode::Random,
    };
    let spec = match mode {
        SplitMode::Official => SplitSpec::official(),
        SplitMode::Random => SplitSpec::random(ratio, seed).map_err(|e| usage(format!("--ratio: {e}")))?,
    };
    if !target.width.is_multiple_of(28) || !target.height.is_multiple_of(28) {
        log::warn!("target {target} is not a multiple of 28");
    }

    let built = build_dataset(&manifest, &spec, target, train_config).map_err(data)?;
    write_output(&out.join("train.jsonl"), &built.train_jsonl())?;
    write_output(&out.join("test.jsonl"), &built.test_jsonl())?;
    write_output(&out.join("build_report.json"), &built.report.to_json())?;
    eprintln!(
        "wrote {} train / {} test samples to {} ({} boxes dropped)",
        built.train.len(),
        built.test.len(),
        out.display(),
        built.report.train.dropped_boxes + built.report.test.dropped_boxes
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth JSONL (the `test.jsonl` written by `build`).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Transcript JSONL: {"id": ..., "response": ...} per line.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// IoU threshold in (0, 1].
    #[arg(long)]
    iou: Option<f64>,
    /// fn-only or fn-and-fp.
    #[arg(long)]
    policy: Option<String>,
    /// Table row order, comma-separated; unlisted classes follow alphabetically.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn evaluate(args: EvaluateArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let gt_path = require("gt", pick(args.gt, &cfg.gt))?;
    let tr_path = require("transcripts", pick(args.transcripts, &cfg.transcripts))?;
    let threshold = pick(args.iou, &cfg.iou).unwrap_or(DEFAULT_IOU_THRESHOLD);
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(usage(format!("--iou {threshold} outside (0, 1]")));
    }
    let policy: FailurePolicy = parse_opt("policy", pick(args.policy, &cfg.policy))?.unwrap_or_default();
    let classes = if args.classes.is_empty() {
        cfg.classes.clone().unwrap_or_default()
    } else {
        args.classes
    };

    let gt: Vec<InstructSample> = from_jsonl(&read_input(&gt_path)?)
        .map_err(|e| data(anyhow::anyhow!("{}: {e}", gt_path.display())))?;
    let transcripts: Vec<Transcript> = from_jsonl(&read_input(&tr_path)?)
        .map_err(|e| data(anyhow::anyhow!("{}: {e}", tr_path.display())))?;

    let report = score(&gt, &transcripts, threshold, policy).map_err(data)?;
    match pick(args.out, &cfg.out) {
        Some(path) => write_output(&path, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    print!("{}", report.to_table(&classes));
    Ok(())
}

// ---------------------------------------------------------------------------
// parse-check

#[derive(Debug, Args)]
pub struct ParseCheckArgs {
    /// Transcript JSONL: {"id": ..., "response": ...} per line.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Salvage valid elements instead of failing the whole response.
    #[arg(long)]
    lenient: bool,
    /// Write per-response outcomes here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_check(args: ParseCheckArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let tr_path = require("transcripts", pick(args.transcripts, &cfg.transcripts))?;
    let transcripts: Vec<Transcript> = from_jsonl(&read_input(&tr_path)?)
        .map_err(|e| data(anyhow::anyhow!("{}: {e}", tr_path.display())))?;
    let (kept, dups) = dedup_last_wins(&transcripts);
    for id in &dups {
        log::warn!("duplicate transcript id {id:?}: keeping the last one");
    }

    let mut lines = String::new();
    let mut ok = 0usize;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for t in kept {
        let outcome = if args.lenient {
            lenient_extract(&t.response).map(|s| json!({"detections": s.detections.len(), "dropped": s.dropped}))
        } else {
            extract_json(&t.response).map(|d| json!({"detections": d.len()}))
        };
        let mut line = match outcome {
            Ok(v) => {
                ok += 1;
                let mut v = v;
                v["ok"] = json!(true);
                v
            }
            Err(f) => {
                *reasons.entry(f.reason.to_string()).or_default() += 1;
                json!({"ok": false, "reason": f.reason.as_str(), "offset": f.offset})
            }
        };
        line["id"] = Value::String(t.id.clone());
        lines.push_str(&serde_json::to_string(&line).expect("value serializes"));
        lines.push('\n');
    }
    let total = transcripts.len() - dups.len();
    let summary = json!({
        "total": total,
        "ok": ok,
        "failed": total - ok,
        "duplicates": dups.len(),
        "reasons": reasons,
        "mode": if args.lenient { "lenient" } else { "strict" },
    });
    match pick(args.out, &cfg.out) {
        Some(path) => {
            write_output(&path, &lines)?;
            print!("{}", canonical(&summary));
        }
        None => {
            print!("{lines}");
            eprint!("{}", canonical(&summary));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// lora-demo

#[derive(Debug, Args)]
pub struct LoraDemoArgs {
    /// Base noise scale for the embedding-noise check (no default).
    #[arg(long)]
    alpha: Option<f64>,
    /// Sequence length L.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Embedding dimension d.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter rank echoed in the training config (8, 16 or 32).
    #[arg(long)]
    rank: Option<u32>,
    /// Random adapters in the merge check.
    #[arg(long, default_value_t = 100)]
    adapters: usize,
    /// Random inputs per adapter.
    #[arg(long, default_value_t = 100)]
    inputs: usize,
}

pub fn lora_demo(args: LoraDemoArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let alpha = require("alpha", pick(args.alpha, &cfg.alpha))?;
    let seq_len = pick(args.seq_len, &cfg.seq_len).unwrap_or(100);
    let dim = pick(args.dim, &cfg.dim).unwrap_or(64);
    let seed = pick(args.seed, &cfg.seed).unwrap_or(0);
    let train_config = match pick(args.rank, &cfg.rank) {
        Some(r) => TrainConfig::with_rank(r).map_err(|e| usage(format!("--rank: {e}")))?,
        None => TrainConfig::default(),
    };
    let spec = NoiseSpec::new(alpha, seq_len, dim, seed).map_err(|e| usage(e.to_string()))?;

    let equivalence = check_equivalence(args.adapters, args.inputs, 64, 8, seed);

    let noise = neftune_sample(&spec, 4);
    let again = neftune_sample(&spec, 4);
    let scale = spec.scale();
    let max_abs = noise.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean_abs = noise.data.iter().map(|v| v.abs()).sum::<f64>() / noise.data.len() as f64;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (d, k, r) = (64, 48, 8);
    let adapter = LowRankAdapter::init(Matrix::random(d, k, &mut rng), r, &mut rng).map_err(data)?;

    let doc = json!({
        "train_config": train_config,
        "merge_equivalence": {
            "adapters": equivalence.adapters,
            "inputs_per_adapter": equivalence.inputs_per_adapter,
            "max_relative_error": equivalence.max_relative_error,
            "tolerance": 1e-12,
            "passed": equivalence.max_relative_error <= 1e-12,
            "zero_b_bitwise_equal": equivalence.zero_b_bitwise_equal,
            "base_unchanged": equivalence.base_unchanged,
        },
        "noise": {
            "alpha": alpha,
            "seq_len": seq_len,
            "dim": dim,
            "batch": noise.batch,
            "scale": scale,
            "max_abs": max_abs,
            "mean_abs": mean_abs,
            "expected_mean_abs": scale / 2.0,
            "within_bound": max_abs <= scale,
            "deterministic": noise == again,
        },
        "parameters": {
            "d": d,
            "k": k,
            "rank": r,
            "trainable": adapter.trainable_params(),
            "full": adapter.full_params(),
            "fraction": adapter.trainable_params() as f64 / adapter.full_params() as f64,
        },
    });
    print!("{}", canonical(&doc));
    Ok(())
}

// ---------------------------------------------------------------------------
// stats

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn stats(args: StatsArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let path = require("manifest", pick(args.manifest, &cfg.manifest))?;
    let manifest = DatasetManifest::from_json(&read_input(&path)?).map_err(data)?;
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut splits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    let mut boxes = 0;
    for r in &manifest.records {
        boxes += r.detections.len();
        for d in &r.detections {
            *per_class.entry(d.label.as_str()).or_default() += 1;
        }
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unsplit => "unsplit",
        };
        *splits.entry(split).or_default() += 1;
        *sizes.entry(r.dims.to_string()).or_default() += 1;
    }
    let doc = json!({
        "name": manifest.name,
        "modality": manifest.modality,
        "categories": manifest.categories,
        "images": manifest.records.len(),
        "boxes": boxes,
        "per_class": per_class,
        "splits": splits,
        "image_sizes": sizes,
    });
    print!("{}", canonical(&doc));
    Ok(())
}
