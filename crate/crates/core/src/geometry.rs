//! Axis-aligned box arithmetic in pixel space.
//!
//! Boxes use the continuous-coordinate convention: a box `[x1, y1, x2, y2]`
//! covers the half-open region `[x1, x2) × [y1, y2)` and its area is
//! `(x2 - x1) * (y2 - y1)`. There is no `+1` pixel-inclusive correction.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("box {bbox} lies outside the {dims} source frame")]
    OutOfBounds { bbox: BBox, dims: Dims },
    #[error("box {0} collapsed to zero area after rescaling")]
    DegenerateBox(BBox),
}

/// Axis-aligned box `[x1, y1, x2, y2]`, top-left then bottom-right corner.
///
/// Construction through [`BBox::new`] guarantees `0 <= x1 < x2`,
/// `0 <= y1 < y2` and finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox { x1, y1, x2, y2, reason };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(invalid("negative coordinate"));
        }
        if x1 >= x2 {
            return Err(invalid("x1 must be less than x2"));
        }
        if y1 >= y2 {
            return Err(invalid("y1 must be less than y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when the box fits inside a `dims` frame anchored at the origin.
    pub fn within(&self, dims: Dims) -> bool {
        self.x2 <= f64::from(dims.width) && self.y2 <= f64::from(dims.height)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Whole-pixel coordinates serialize as JSON integers (`126`, not `126.0`).
impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeTuple;
        const EXACT: f64 = 9_007_199_254_740_992.0;
        let mut t = serializer.serialize_tuple(4)?;
        for v in self.to_array() {
            if v.fract() == 0.0 && v.abs() < EXACT {
                t.serialize_element(&(v as i64))?;
            } else {
                t.serialize_element(&v)?;
            }
        }
        t.end()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(deserializer)?;
        BBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Image dimensions in whole pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Dims {
    type Err = String;

    /// Parses `WIDTHxHEIGHT`, e.g. `644x644`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let width = w.trim().parse::<u32>().map_err(|e| format!("bad width {w:?}: {e}"))?;
        let height = h.trim().parse::<u32>().map_err(|e| format!("bad height {h:?}: {e}"))?;
        Dims::new(width, height).map_err(|e| e.to_string())
    }
}

/// Intersection over union. Zero for disjoint or merely touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    // identical boxes must give exactly 1
    if inter >= union {
        return 1.0;
    }
    inter / union
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Maps a box from a `from`-sized frame to a `to`-sized frame.
///
/// Each axis is scaled independently, rounded half-up to whole pixels and
/// clamped to the target frame. Returns [`GeometryError::DegenerateBox`] when
/// rounding collapses either side to zero length.
pub fn rescale_bbox(b: &BBox, from: Dims, to: Dims) -> Result<BBox, GeometryError> {
    if !b.within(from) {
        return Err(GeometryError::OutOfBounds { bbox: *b, dims: from });
    }
    let (fw, fh) = (f64::from(from.width), f64::from(from.height));
    let (tw, th) = (f64::from(to.width), f64::from(to.height));
    let sx = |v: f64| round_half_up(v * tw / fw).clamp(0.0, tw);
    let sy = |v: f64| round_half_up(v * th / fh).clamp(0.0, th);
    let (x1, y1, x2, y2) = (sx(b.x1), sy(b.y1), sx(b.x2), sy(b.y2));
    if x1 >= x2 || y1 >= y2 {
        return Err(GeometryError::DegenerateBox(BBox { x1, y1, x2, y2 }));
    }
    Ok(BBox { x1, y1, x2, y2 })
}

/// Rounds each side to the nearest multiple of `m` (ties upward), never below `m`.
///
/// # Panics
/// Panics if `m == 0`.
pub fn snap_to_multiple(d: Dims, m: u32) -> Dims {
    assert!(m >= 1, "snap multiple must be positive");
    let largest = u64::from(u32::MAX - u32::MAX % m);
    let snap = |v: u32| {
        let (v, m) = (u64::from(v), u64::from(m));
        let k = ((v + m / 2) / m).max(1);
        (k * m).min(largest) as u32
    };
    Dims {
        width: snap(d.width),
        height: snap(d.height),
    }
}
