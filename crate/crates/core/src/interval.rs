//! Localization as classification.
//!
//! Each side of a candidate box gets a line segment perpendicular to it,
//! centered on the side and `scale` times the box extent along that axis.
//! The segment is split into `K` equal intervals. A side is located by
//! classifying which interval the true coordinate falls in, then refined by
//! an offset from that interval's center, measured in interval widths.
//!
//! Sides are indexed in corner order: left (`x1`), top (`y1`), right (`x2`),
//! bottom (`y2`). Interval indices are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_SIDES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Top,
    Right,
    Bottom,
}

impl Side {
    pub const ALL: [Side; NUM_SIDES] = [Side::Left, Side::Top, Side::Right, Side::Bottom];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_horizontal_axis(self) -> bool {
        matches!(self, Side::Left | Side::Right)
    }
}

/// One side's segment: `[start, start + k * width)` per interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub width: f64,
}

impl Segment {
    pub fn end(&self, k: usize) -> f64 {
        self.start + k as f64 * self.width
    }

    /// Center line of interval `k` (0-based).
    pub fn center(&self, k: usize) -> f64 {
        self.start + (k as f64 + 0.5) * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    candidate: BBox,
    k: usize,
    scale: f64,
    segments: [Segment; NUM_SIDES],
}

impl IntervalGrid {
    /// Build the four per-side segments for `candidate`.
    ///
    /// `k = 1` is accepted and degenerates to plain offset regression over the
    /// whole segment.
    pub fn new(candidate: BBox, k: usize, scale: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k", "interval count must be positive"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param("scale", format!("{scale} must be positive")));
        }
        if !(candidate.area() > 0.0) {
            return Err(Error::param("candidate", "zero-area candidate box"));
        }
        let corners = candidate.corners();
        let segments = Side::ALL.map(|side| {
            let extent = if side.is_horizontal_axis() {
                candidate.width()
            } else {
                candidate.height()
            };
            let length = scale * extent;
            Segment {
                start: corners[side.index()] - 0.5 * length,
                width: length / k as f64,
            }
        });
        if segments.iter().any(|s| !(s.width > 0.0)) {
            return Err(Error::param("candidate", "degenerate interval width"));
        }
        Ok(Self {
            candidate,
            k,
            scale,
            segments,
        })
    }

    pub fn candidate(&self) -> &BBox {
        &self.candidate
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn segment(&self, side: Side) -> &Segment {
        &self.segments[side.index()]
    }

    /// Interval containing `coord` on `side`; coordinates off the segment clamp
    /// to the nearest end interval. An edge belongs to the interval starting
    /// there.
    pub fn interval_of(&self, side: Side, coord: f64) -> usize {
        let seg = self.segment(side);
        let pos = ((coord - seg.start) / seg.width).floor();
        if pos < 0.0 {
            0
        } else {
            (pos as usize).min(self.k - 1)
        }
    }

    /// Encode a ground-truth box into per-side interval labels and offsets.
    pub fn encode(&self, gt: &BBox) -> IntervalTargets {
        let corners = gt.corners();
        let mut labels = [0; NUM_SIDES];
        let mut offsets = [0.0; NUM_SIDES];
        for side in Side::ALL {
            let i = side.index();
            let k = self.interval_of(side, corners[i]);
            let seg = self.segment(side);
            labels[i] = k;
            offsets[i] = ((corners[i] - seg.center(k)) / seg.width).clamp(-0.5, 0.5);
        }
        IntervalTargets { labels, offsets }
    }

    /// Decode a prediction into a box plus its localization quality.
    ///
    /// Returns [`Error::InvalidBox`] when the decoded sides cross; callers
    /// drop such candidates.
    pub fn decode(&self, pred: &IntervalPrediction) -> Result<(BBox, f64)> {
        pred.check_shape(self.k)?;
        let mut coords = [0.0; NUM_SIDES];
        for side in Side::ALL {
            let i = side.index();
            let k = argmax(&pred.logits[i]);
            let seg = self.segment(side);
            coords[i] = seg.center(k) + pred.offsets[i][k] * seg.width;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])?;
        Ok((bbox, quality(pred)))
    }

    /// Prediction that decodes exactly to `targets`: logit `+margin` on each
    /// labeled interval, `-margin` elsewhere, offsets equal to the targets on
    /// every interval.
    pub fn perfect_prediction(&self, targets: &IntervalTargets, margin: f64) -> IntervalPrediction {
        let mut pred = IntervalPrediction::filled(self.k, -margin, 0.0);
        for i in 0..NUM_SIDES {
            pred.logits[i][targets.labels[i]] = margin;
            pred.offsets[i].fill(targets.offsets[i]);
        }
        pred
    }
}

pub fn build_grid(candidate: BBox, k: usize, scale: f64) -> Result<IntervalGrid> {
    IntervalGrid::new(candidate, k, scale)
}

/// Per-side labeled interval and normalized offset target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalTargets {
    pub labels: [usize; NUM_SIDES],
    pub offsets: [f64; NUM_SIDES],
}

impl IntervalTargets {
    /// One-hot label for interval `k` on side `s`.
    pub fn y(&self, s: usize, k: usize) -> f64 {
        if self.labels[s] == k {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-side interval logits and per-interval normalized offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPrediction {
    pub logits: [Vec<f64>; NUM_SIDES],
    pub offsets: [Vec<f64>; NUM_SIDES],
}

impl IntervalPrediction {
    pub fn filled(k: usize, logit: f64, offset: f64) -> Self {
        Self {
            logits: std::array::from_fn(|_| vec![logit; k]),
            offsets: std::array::from_fn(|_| vec![offset; k]),
        }
    }

    pub fn k(&self) -> usize {
        self.logits[0].len()
    }

    pub fn check_shape(&self, k: usize) -> Result<()> {
        for s in 0..NUM_SIDES {
            if self.logits[s].len() != k || self.offsets[s].len() != k {
                return Err(Error::Shape(format!(
                    "side {s}: {} logits / {} offsets, grid has {k} intervals",
                    self.logits[s].len(),
                    self.offsets[s].len()
                )));
            }
        }
        let finite = self
            .logits
            .iter()
            .chain(self.offsets.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Shape("non-finite logit or offset".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Localization quality: mean over sides of `sigmoid(max_k logit)`.
pub fn quality(pred: &IntervalPrediction) -> f64 {
    pred.logits
        .iter()
        .map(|side| sigmoid(side.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .sum::<f64>()
        / NUM_SIDES as f64
}
