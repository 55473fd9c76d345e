//! Precision / recall / F1 at an IoU threshold.
//!
//! Responses carry no confidence scores, so there is no ranking to build a
//! precision-recall curve from and AP is not computed. Predictions are matched
//! greedily in the order the model emitted them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Detection;
use crate::geometry::iou;
use crate::instruct::InstructSample;
use crate::parser::{extract_json, ParseFailure};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("transcript id {0:?} has no ground-truth sample")]
    UnknownImageId(String),
    #[error("ground-truth sample {id:?} has an unparseable response: {failure}")]
    BadGroundTruth { id: String, failure: ParseFailure },
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
}

/// How an unparseable response is charged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Every ground-truth object in the image is a false negative.
    #[default]
    FnOnly,
    /// As `FnOnly`, plus one false positive per ground-truth object.
    FnAndFp,
}

impl FromStr for FailurePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fn-only" => Ok(FailurePolicy::FnOnly),
            "fn-and-fp" => Ok(FailurePolicy::FnAndFp),
            other => Err(format!("unknown policy {other:?} (expected fn-only or fn-and-fp)")),
        }
    }
}

impl fmt::Display for FailurePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailurePolicy::FnOnly => "fn-only",
            FailurePolicy::FnAndFp => "fn-and-fp",
        })
    }
}

/// Prediction-to-ground-truth assignment for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(pred index, gt index, iou)`
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }
}

/// IoU for every (pred, gt) pair, `NEG_INFINITY` where the labels differ.
pub fn score_matrix(preds: &[Detection], gts: &[Detection]) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| if p.label == g.label { iou(&p.bbox, &g.bbox) } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect()
}

/// Greedy assignment over a score matrix (`scores[pred][gt]`).
///
/// Rows are visited in order; each takes the still-free column with the
/// highest score `>= threshold`, lowest column index on ties.
pub fn assign_greedy(scores: &[Vec<f64>], n_gt: usize, threshold: f64) -> MatchResult {
    let mut taken = vec![false; n_gt];
    let mut result = MatchResult::default();
    for (p, row) in scores.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &s) in row.iter().enumerate() {
            if taken[g] || s < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        match best {
            Some((g, s)) => {
                taken[g] = true;
                result.matches.push((p, g, s));
            }
            None => result.unmatched_preds.push(p),
        }
    }
    result.unmatched_gts = (0..n_gt).filter(|&g| !taken[g]).collect();
    result
}

/// Maximum-cardinality assignment on the `score >= threshold` graph
/// (Kuhn's augmenting paths). Used as the reference for the greedy matcher.
pub fn assign_optimal(scores: &[Vec<f64>], n_gt: usize, threshold: f64) -> MatchResult {
    fn augment(p: usize, scores: &[Vec<f64>], threshold: f64, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for (g, &s) in scores[p].iter().enumerate() {
            if s < threshold || seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, scores, threshold, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; n_gt];
    let mut seen = vec![false; n_gt];
    for p in 0..scores.len() {
        seen.fill(false);
        augment(p, scores, threshold, &mut seen, &mut owner);
    }
    let mut pred_used = vec![false; scores.len()];
    let mut result = MatchResult::default();
    for (g, o) in owner.iter().enumerate() {
        match *o {
            Some(p) => {
                pred_used[p] = true;
                result.matches.push((p, g, scores[p][g]));
            }
            None => result.unmatched_gts.push(g),
        }
    }
    result.matches.sort_unstable_by_key(|&(p, _, _)| p);
    result.unmatched_preds = (0..scores.len()).filter(|&p| !pred_used[p]).collect();
    result
}

/// Greedy, label-gated matching in prediction order.
pub fn match_greedy(preds: &[Detection], gts: &[Detection], threshold: f64) -> MatchResult {
    assign_greedy(&score_matrix(preds, gts), gts.len(), threshold)
}

/// Maximum-cardinality, label-gated matching.
pub fn match_optimal(preds: &[Detection], gts: &[Detection], threshold: f64) -> MatchResult {
    assign_optimal(&score_matrix(preds, gts), gts.len(), threshold)
}

pub fn precision(tp: u64, fp: u64) -> f64 {
    ratio(tp, tp + fp)
}

pub fn recall(tp: u64, fn_: u64) -> f64 {
    ratio(tp, tp + fn_)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let sum = precision + recall;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / sum
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn metrics(&self) -> Metrics {
        let p = precision(self.tp, self.fp);
        let r = recall(self.tp, self.fn_);
        Metrics {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: p,
            recall: r,
            f1: f1_score(p, r),
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq, Eq)]
pub struct Transcript {
    pub id: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, Metrics>,
    pub overall: Metrics,
    pub images_evaluated: usize,
    pub parse_failure_images: usize,
    pub failure_reasons: BTreeMap<String, usize>,
    pub policy: FailurePolicy,
    pub iou_threshold: f64,
}

/// Drops earlier transcripts that share an id with a later one.
pub fn dedup_last_wins(transcripts: &[Transcript]) -> (Vec<&Transcript>, Vec<String>) {
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (i, t) in transcripts.iter().enumerate() {
        last.insert(t.id.as_str(), i);
    }
    let mut dups = Vec::new();
    let kept = transcripts
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let keep = last[t.id.as_str()] == *i;
            if !keep {
                dups.push(t.id.clone());
            }
            keep
        })
        .map(|(_, t)| t)
        .collect();
    (kept, dups)
}

/// Scores transcripts against ground-truth samples.
///
/// A ground-truth image without a transcript counts as a parse failure.
/// Duplicate transcript ids resolve to the last occurrence.
pub fn evaluate(
    gt: &[InstructSample],
    transcripts: &[Transcript],
    threshold: f64,
    policy: FailurePolicy,
) -> Result<EvalReport, EvalError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::BadThreshold(threshold));
    }
    let gt_ids: HashMap<&str, usize> = gt.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let (transcripts, dups) = dedup_last_wins(transcripts);
    for id in dups {
        log::warn!("duplicate transcript id {id:?}: keeping the last one");
    }
    let mut responses: Vec<Option<&str>> = vec![None; gt.len()];
    for t in transcripts {
        let &i = gt_ids
            .get(t.id.as_str())
            .ok_or_else(|| EvalError::UnknownImageId(t.id.clone()))?;
        responses[i] = Some(&t.response);
    }

    let mut per_class: BTreeMap<String, Counts> = BTreeMap::new();
    let mut failures = 0;
    let mut failure_reasons: BTreeMap<String, usize> = BTreeMap::new();

    for (sample, response) in gt.iter().zip(responses) {
        let truth = extract_json(&sample.response).map_err(|failure| EvalError::BadGroundTruth {
            id: sample.id.clone(),
            failure,
        })?;
        for g in &truth {
            per_class.entry(g.label.clone()).or_default();
        }
        let parsed = match response {
            Some(text) => extract_json(text).map_err(|f| f.reason.to_string()),
            None => Err("missing-transcript".to_string()),
        };
        match parsed {
            Ok(preds) => {
                let m = match_greedy(&preds, &truth, threshold);
                for &(p, _, _) in &m.matches {
                    per_class.entry(preds[p].label.clone()).or_default().tp += 1;
                }
                for &p in &m.unmatched_preds {
                    per_class.entry(preds[p].label.clone()).or_default().fp += 1;
                }
                for &g in &m.unmatched_gts {
                    per_class.entry(truth[g].label.clone()).or_default().fn_ += 1;
                }
            }
            Err(reason) => {
                failures += 1;
                *failure_reasons.entry(reason).or_default() += 1;
                for g in &truth {
                    let c = per_class.entry(g.label.clone()).or_default();
                    c.fn_ += 1;
                    if policy == FailurePolicy::FnAndFp {
                        c.fp += 1;
                    }
                }
            }
        }
    }

    let mut total = Counts::default();
    for c in per_class.values() {
        total += *c;
    }
    Ok(EvalReport {
        per_class: per_class.into_iter().map(|(k, c)| (k, c.metrics())).collect(),
        overall: total.metrics(),
        images_evaluated: gt.len(),
        parse_failure_images: failures,
        failure_reasons,
        policy,
        iou_threshold: threshold,
    })
}

impl EvalReport {
    /// Canonical JSON: sorted keys, pretty-printed, trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }

    /// Plain-text table: one row per category, then `all`.
    ///
    /// Categories listed in `order` come first in that order; the rest
    /// follow alphabetically.
    pub fn to_table(&self, order: &[String]) -> String {
        let mut rows: Vec<&str> = order
            .iter()
            .map(String::as_str)
            .filter(|c| self.per_class.contains_key(*c))
            .collect();
        for c in self.per_class.keys() {
            if !rows.contains(&c.as_str()) {
                rows.push(c);
            }
        }
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0).max("Category".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>8}  {:>6}  {:>6}  {:>6}",
            "Category", "P", "R", "F1-Score", "TP", "FP", "FN"
        );
        let mut line = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.4}  {:>6.4}  {:>8.4}  {:>6}  {:>6}  {:>6}",
                name, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        };
        for r in &rows {
            line(r, &self.per_class[*r]);
        }
        line("all", &self.overall);
        out
    }
}
