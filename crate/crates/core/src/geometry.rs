//! Box arithmetic, IoU, horizontal flips and class-wise NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, `(x1, y1)` top-left and
/// `(x2, y2)` bottom-right. Always satisfies `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 {
            return Err(invalid("x1 must be less than x2"));
        }
        if y1 >= y2 {
            return Err(invalid("y1 must be less than y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidBox {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + h,
                reason: "width and height must be positive",
            });
        }
        Self::new(x, y, x + w, y + h)
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

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Intersection over union; 0 for disjoint boxes, exactly 1 for `a.iou(a)`.
    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Reflect about the vertical center line of an image of `image_width`.
    pub fn hflip(&self, image_width: f64) -> Result<BBox> {
        if !(self.x1 >= 0.0 && self.x2 <= image_width) {
            return Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                reason: "box extends outside the image width",
            });
        }
        BBox::new(
            image_width - self.x2,
            self.y1,
            image_width - self.x1,
            self.y2,
        )
    }

    /// Intersection with the image `[0, width] x [0, height]`; errors if empty.
    pub fn clip(&self, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn hflip(b: &BBox, image_width: f64) -> Result<BBox> {
    b.hflip(image_width)
}

/// A teacher detection: box, class, classification confidence `p` and
/// localization quality `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub p: f64,
    pub v: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, p: f64, v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param("p", format!("{p} not in [0, 1]")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::param("v", format!("{v} not in [0, 1]")));
        }
        Ok(Self {
            bbox,
            class_id,
            p,
            v,
        })
    }

    pub fn combined(&self) -> f64 {
        self.p * self.v
    }

    pub fn score(&self, by: ScoreKind) -> f64 {
        match by {
            ScoreKind::P => self.p,
            ScoreKind::PTimesV => self.combined(),
        }
    }
}

/// Which certainty drives ranking or filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Classification confidence only.
    P,
    /// Classification confidence times localization quality.
    #[default]
    PTimesV,
}

/// Indices of `scores` sorted by descending score, ties by lower index.
pub(crate) fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited in descending rank (ties: lower input index); each
/// survivor removes every remaining same-class detection with
/// `IoU >= iou_threshold`. Survivors are returned in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64, ranking: ScoreKind) -> Vec<Detection> {
    nms_indices(dets, iou_threshold, ranking)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Like [`nms`] but returns the surviving input indices.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, ranking: ScoreKind) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score(ranking)).collect();
    let order = rank_order(&scores);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && dets[i].bbox.iou(&dets[j].bbox) >= iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}
