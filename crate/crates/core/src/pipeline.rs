//! Pseudo-label generation for one unlabeled image: decode candidates, rank,
//! suppress, filter with per-class thresholds and attach per-class weights.

use serde::{Deserialize, Serialize};

use crate::balance::{BalanceParams, ClassBalanceState};
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Detection, ScoreKind};
use crate::interval::{argmax, IntervalGrid, IntervalPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    pub nms_iou: f64,
    pub ranking: ScoreKind,
    pub filter_score: ScoreKind,
    /// Intervals per side.
    pub k: usize,
    /// Segment length as a multiple of the candidate extent.
    pub scale: f64,
    pub balance: BalanceParams,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            ranking: ScoreKind::PTimesV,
            filter_score: ScoreKind::PTimesV,
            k: 30,
            scale: 2.0,
            balance: BalanceParams::default(),
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::param("nms_iou", format!("{} not in (0, 1)", self.nms_iou)));
        }
        if self.k < 2 {
            return Err(Error::param("k", format!("{} intervals; need at least 2", self.k)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::param("scale", format!("{} must be positive", self.scale)));
        }
        self.balance.validate()
    }

    /// The classic classification-confidence filter: rank and filter on `p`
    /// with one fixed threshold.
    pub fn baseline(self) -> Self {
        Self {
            ranking: ScoreKind::P,
            filter_score: ScoreKind::P,
            balance: self.balance.disabled(),
            ..self
        }
    }
}

/// Raw teacher output for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub candidate: BBox,
    /// Probabilities over `M` foreground classes followed by background.
    pub class_scores: Vec<f64>,
    pub prediction: IntervalPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub class_id: usize,
    pub p: f64,
    pub v: f64,
    pub combined: f64,
}

impl PseudoLabel {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            class_id: d.class_id,
            p: d.p,
            v: d.v,
            combined: d.combined(),
        }
    }

    pub fn score(&self, by: ScoreKind) -> f64 {
        match by {
            ScoreKind::P => self.p,
            ScoreKind::PTimesV => self.combined,
        }
    }
}

/// Filtered, weighted pseudo ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image_id: u64,
    pub labels: Vec<PseudoLabel>,
    /// Per-class loss weights in effect.
    pub alpha: Vec<f64>,
    /// Per-class thresholds in effect.
    pub tau_used: Vec<f64>,
}

impl PseudoLabelSet {
    /// Map every box through a horizontal flip; scores are unchanged.
    pub fn hflip(&self, image_width: f64) -> Result<PseudoLabelSet> {
        let labels = self
            .labels
            .iter()
            .map(|l| {
                Ok(PseudoLabel {
                    bbox: l.bbox.hflip(image_width)?,
                    ..*l
                })
            })
            .collect::<Result<_>>()?;
        Ok(PseudoLabelSet {
            labels,
            ..self.clone()
        })
    }
}

pub fn transform_labels_hflip(set: &PseudoLabelSet, image_width: f64) -> Result<PseudoLabelSet> {
    set.hflip(image_width)
}

/// Decode raw candidates into foreground detections.
///
/// Candidates whose top class is background, or whose decoded sides cross,
/// are dropped.
pub fn decode_candidates(
    raw: &[RawCandidate],
    num_classes: usize,
    params: &PipelineParams,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, cand) in raw.iter().enumerate() {
        if cand.class_scores.len() != num_classes + 1 {
            return Err(Error::Shape(format!(
                "candidate {i}: {} class scores, expected {} (+ background)",
                cand.class_scores.len(),
                num_classes
            )));
        }
        if let Some(s) = cand.class_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::param("class_scores", format!("candidate {i}: score {s} not in [0, 1]")));
        }
        let class_id = argmax(&cand.class_scores);
        if class_id == num_classes {
            continue;
        }
        let grid = IntervalGrid::new(cand.candidate, params.k, params.scale)?;
        match grid.decode(&cand.prediction) {
            Ok((bbox, v)) => out.push(Detection {
                bbox,
                class_id,
                p: cand.class_scores[class_id],
                v,
            }),
            Err(Error::InvalidBox { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Suppress and filter already-decoded detections against fixed snapshots of
/// per-class thresholds and weights.
pub fn select_pseudo_labels(
    image_id: u64,
    dets: &[Detection],
    tau: &[f64],
    alpha: &[f64],
    params: &PipelineParams,
) -> Result<PseudoLabelSet> {
    if tau.len() != alpha.len() {
        return Err(Error::Shape(format!("{} thresholds vs {} weights", tau.len(), alpha.len())));
    }
    if let Some(d) = dets.iter().find(|d| d.class_id >= tau.len()) {
        return Err(Error::UnknownClass {
            class_id: d.class_id,
            num_classes: tau.len(),
        });
    }
    let labels = nms(dets, params.nms_iou, params.ranking)
        .iter()
        .filter(|d| d.score(params.filter_score) >= tau[d.class_id])
        .map(PseudoLabel::from_detection)
        .collect();
    Ok(PseudoLabelSet {
        image_id,
        labels,
        alpha: alpha.to_vec(),
        tau_used: tau.to_vec(),
    })
}

/// Full per-image flow from raw teacher output to a [`PseudoLabelSet`].
pub fn generate_pseudo_labels(
    image_id: u64,
    raw: &[RawCandidate],
    state: &ClassBalanceState,
    params: &PipelineParams,
) -> Result<PseudoLabelSet> {
    let dets = decode_candidates(raw, state.num_classes(), params)?;
    let tau = state.thresholds(&params.balance);
    let alpha = state.weights(&params.balance);
    select_pseudo_labels(image_id, &dets, &tau, &alpha, params)
}
