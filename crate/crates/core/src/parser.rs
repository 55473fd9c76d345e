//! Recovering detection JSON from free-text model responses.
//!
//! The locator works in two passes. Fenced code blocks (```` ``` ````) are
//! searched first, then the whole text. In each pass every `[` starts a
//! candidate span that runs to its matching bracket, with brackets inside JSON
//! strings ignored. The first candidate that parses as a strict JSON array is
//! the answer; a candidate that fails to parse is skipped as a whole, so an
//! array nested inside it is never picked up on its own.
//!
//! [`extract_json`] is the strict, metric-bearing mode: one bad element fails
//! the whole response. [`lenient_extract`] keeps the good elements and counts
//! the rest; it is a diagnostic and must not feed headline metrics.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotation::Detection;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    NoJsonFound,
    InvalidJson,
    BadElement,
    BadBbox,
    BadLabel,
}

impl FailureReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureReason::NoJsonFound => "no-json-found",
            FailureReason::InvalidJson => "invalid-json",
            FailureReason::BadElement => "bad-element",
            FailureReason::BadBbox => "bad-bbox",
            FailureReason::BadLabel => "bad-label",
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a response yielded no detections. `offset` is a byte offset into the
/// original text when one is meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub reason: FailureReason,
    pub offset: Option<usize>,
    pub detail: String,
}

impl ParseFailure {
    fn new(reason: FailureReason, offset: Option<usize>, detail: impl Into<String>) -> Self {
        Self {
            reason,
            offset,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.reason)?;
        if let Some(off) = self.offset {
            write!(f, " at byte {off}")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseFailure {}

pub type ParseOutcome = Result<Vec<Detection>, ParseFailure>;

/// Result of [`lenient_extract`]: the elements that validated and how many
/// were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Salvage {
    pub detections: Vec<Detection>,
    pub dropped: usize,
}

struct Located {
    offset: usize,
    elements: Vec<Value>,
}

/// Byte ranges of fenced code block bodies, in order. An unclosed fence runs
/// to the end of the text.
fn fenced_blocks(text: &str) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while let Some(open) = text[pos..].find("```") {
        let after = pos + open + 3;
        // the info string ("json", "JSON", ...) runs to the end of the line
        let body = match text[after..].find('\n') {
            Some(nl) => after + nl + 1,
            None => text.len(),
        };
        match text[body..].find("```") {
            Some(close) => {
                blocks.push((body, body + close));
                pos = body + close + 3;
            }
            None => {
                blocks.push((body, text.len()));
                break;
            }
        }
    }
    blocks
}

/// End (exclusive) of the bracket span opening at `start`, or `None` if the
/// text ends first.
fn matching_bracket(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

enum Scan {
    Found(Located),
    /// a span was found but none parsed; offset of the first such span
    Invalid(usize, String),
    Nothing,
}

fn scan_region(text: &str, from: usize, to: usize) -> Scan {
    let bytes = &text.as_bytes()[..to];
    let mut first_invalid: Option<(usize, String)> = None;
    let mut pos = from;
    while let Some(rel) = bytes[pos..].iter().position(|&b| b == b'[') {
        let start = pos + rel;
        let Some(end) = matching_bracket(bytes, start) else {
            first_invalid.get_or_insert((start, "unterminated array".into()));
            break;
        };
        match serde_json::from_str::<Value>(&text[start..end]) {
            Ok(Value::Array(elements)) => {
                return Scan::Found(Located {
                    offset: start,
                    elements,
                })
            }
            Ok(_) => unreachable!("span opens with '['"),
            Err(e) => {
                first_invalid.get_or_insert((start, e.to_string()));
                pos = end;
            }
        }
    }
    match first_invalid {
        Some((off, msg)) => Scan::Invalid(off, msg),
        None => Scan::Nothing,
    }
}

fn locate(text: &str) -> Result<Located, ParseFailure> {
    let mut first_invalid = None;
    let regions = fenced_blocks(text)
        .into_iter()
        .chain(std::iter::once((0, text.len())));
    for (from, to) in regions {
        match scan_region(text, from, to) {
            Scan::Found(found) => return Ok(found),
            Scan::Invalid(off, msg) => {
                first_invalid.get_or_insert((off, msg));
            }
            Scan::Nothing => {}
        }
    }
    Err(match first_invalid {
        Some((off, msg)) => ParseFailure::new(FailureReason::InvalidJson, Some(off), msg),
        None => ParseFailure::new(FailureReason::NoJsonFound, None, "no JSON array in response"),
    })
}

fn validate_element(value: &Value) -> Result<Detection, (FailureReason, String)> {
    let obj = value
        .as_object()
        .ok_or_else(|| (FailureReason::BadElement, format!("element is not an object: {value}")))?;

    let coords = obj
        .get("bbox_2d")
        .and_then(Value::as_array)
        .ok_or_else(|| (FailureReason::BadBbox, "missing or non-array \"bbox_2d\"".to_string()))?;
    if coords.len() != 4 {
        return Err((FailureReason::BadBbox, format!("bbox_2d has {} values, expected 4", coords.len())));
    }
    let mut c = [0.0f64; 4];
    for (slot, v) in c.iter_mut().zip(coords) {
        *slot = v
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| (FailureReason::BadBbox, format!("non-numeric coordinate {v}")))?;
    }
    let bbox = BBox::try_from(c).map_err(|e| (FailureReason::BadBbox, e.to_string()))?;

    let label = obj
        .get("label")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| (FailureReason::BadLabel, "missing, empty or non-string \"label\"".to_string()))?;
    Ok(Detection::new(bbox, label))
}

/// Strict extraction: every element of the located array must be a valid
/// detection, otherwise the whole response is a [`ParseFailure`].
pub fn extract_json(text: &str) -> ParseOutcome {
    let located = locate(text)?;
    located
        .elements
        .iter()
        .enumerate()
        .map(|(i, v)| {
            validate_element(v).map_err(|(reason, msg)| {
                ParseFailure::new(reason, Some(located.offset), format!("element {i}: {msg}"))
            })
        })
        .collect()
}

/// Lenient extraction: same locator, but invalid elements are dropped and
/// counted. Fails only when no parseable array exists at all.
pub fn lenient_extract(text: &str) -> Result<Salvage, ParseFailure> {
    let located = locate(text).map_err(|f| ParseFailure {
        reason: FailureReason::NoJsonFound,
        ..f
    })?;
    let mut detections = Vec::new();
    let mut dropped = 0;
    for v in &located.elements {
        match validate_element(v) {
            Ok(d) => detections.push(d),
            Err(_) => dropped += 1,
        }
    }
    Ok(Salvage { detections, dropped })
}
