//! Greedy IoU matching, COCO-style 101-point AP and pseudo-label quality
//! curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rank_order, BBox};
use crate::pipeline::PseudoLabelSet;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Outcome of greedy matching on one image and class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Prediction indices in descending score order (ties: lower index).
    pub order: Vec<usize>,
    /// For each entry of `order`, the matched ground-truth index.
    pub matched: Vec<Option<usize>>,
    /// Per ground truth: whether some prediction matched it.
    pub covered: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching given a precomputed IoU lookup `iou(pred, gt)`.
fn greedy_match(
    order: &[usize],
    num_gts: usize,
    iou: impl Fn(usize, usize) -> f64,
    threshold: f64,
) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut covered = vec![false; num_gts];
    let matched = order
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, _) in covered.iter().enumerate().filter(|(_, c)| !**c) {
                let x = iou(p, g);
                if x >= threshold && best.is_none_or(|(_, b)| x > b) {
                    best = Some((g, x));
                }
            }
            let g = best.map(|(g, _)| g);
            if let Some(g) = g {
                covered[g] = true;
            }
            g
        })
        .collect();
    (matched, covered)
}

/// Match scored predictions to ground truths of one image and class: each
/// prediction, by descending score, takes the unmatched ground truth with the
/// highest IoU at or above `iou_threshold` (ties: lower ground-truth index).
pub fn match_detections(preds: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let order = rank_order(&scores);
    let (matched, covered) = greedy_match(&order, gts.len(), |p, g| preds[p].0.iou(&gts[g]), iou_threshold);
    MatchResult {
        order,
        matched,
        covered,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

/// 101-point interpolated AP from true-positive flags ordered by descending
/// score.
pub fn interpolated_ap(tp_flags: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Per-image, per-class buckets with IoU matrices computed once and reused
/// across thresholds.
struct ClassBuckets {
    /// image -> (pred indices into the caller's slice, gt boxes)
    images: BTreeMap<u64, (Vec<usize>, Vec<BBox>)>,
    num_gts: usize,
}

fn bucket_by_class(preds: &[EvalDetection], gts: &[GroundTruth]) -> BTreeMap<usize, ClassBuckets> {
    let mut classes: BTreeMap<usize, ClassBuckets> = BTreeMap::new();
    for g in gts {
        let c = classes.entry(g.class_id).or_insert_with(|| ClassBuckets {
            images: BTreeMap::new(),
            num_gts: 0,
        });
        c.images.entry(g.image_id).or_default().1.push(g.bbox);
        c.num_gts += 1;
    }
    for (i, p) in preds.iter().enumerate() {
        if let Some(c) = classes.get_mut(&p.class_id) {
            c.images.entry(p.image_id).or_default().0.push(i);
        }
    }
    classes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub ap: f64,
}

/// AP per class (classes present in `gts`) and per threshold.
pub fn ap_table(preds: &[EvalDetection], gts: &[GroundTruth], thresholds: &[f64]) -> Vec<ApEntry> {
    let mut out = Vec::new();
    for (class_id, bucket) in bucket_by_class(preds, gts) {
        // Per image: ranked prediction indices and the IoU matrix.
        let prepared: Vec<(Vec<usize>, usize, Vec<f64>)> = bucket
            .images
            .values()
            .map(|(pred_idx, gt_boxes)| {
                let scores: Vec<f64> = pred_idx.iter().map(|&i| preds[i].score).collect();
                let order: Vec<usize> = rank_order(&scores);
                let mut iou = Vec::with_capacity(pred_idx.len() * gt_boxes.len());
                for &i in pred_idx {
                    iou.extend(gt_boxes.iter().map(|g| preds[i].bbox.iou(g)));
                }
                (order, gt_boxes.len(), iou)
            })
            .collect();
        let image_preds: Vec<&Vec<usize>> = bucket.images.values().map(|(p, _)| p).collect();
        for &threshold in thresholds {
            // (global input index, score, hit)
            let mut hits: Vec<(usize, f64, bool)> = Vec::new();
            for ((order, num_gts, iou), pred_idx) in prepared.iter().zip(&image_preds) {
                let (matched, _) = greedy_match(order, *num_gts, |p, g| iou[p * num_gts + g], threshold);
                for (&p, m) in order.iter().zip(&matched) {
                    let global = pred_idx[p];
                    hits.push((global, preds[global].score, m.is_some()));
                }
            }
            hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let flags: Vec<bool> = hits.iter().map(|h| h.2).collect();
            out.push(ApEntry {
                class_id,
                iou_threshold: threshold,
                ap: interpolated_ap(&flags, bucket.num_gts),
            });
        }
    }
    out
}

/// Mean over classes present in `gts` of the 101-point AP at one threshold.
pub fn average_precision(preds: &[EvalDetection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    mean_ap(&ap_table(preds, gts, &[iou_threshold]), iou_threshold)
}

fn mean_ap(table: &[ApEntry], threshold: f64) -> f64 {
    let aps: Vec<f64> = table
        .iter()
        .filter(|e| e.iou_threshold == threshold)
        .map(|e| e.ap)
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Pseudo-label precision and recall at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPoint {
    pub iou_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    /// True when there were no pseudo labels; `precision` is then 0.
    pub precision_undefined: bool,
}

/// Raw counts behind a [`QualityPoint`], per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQualityCounts {
    pub class_id: usize,
    pub threshold_index: usize,
    pub pseudo: u64,
    pub pseudo_matched: u64,
    pub gts: u64,
    pub gts_covered: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityCurve {
    pub iou_grid: Vec<f64>,
    pub points: Vec<QualityPoint>,
    pub per_class: Vec<ClassQualityCounts>,
}

impl QualityCurve {
    fn sums(&self, threshold_index: usize, classes: Option<&[usize]>) -> [u64; 4] {
        self.per_class
            .iter()
            .filter(|c| c.threshold_index == threshold_index)
            .filter(|c| classes.is_none_or(|cs| cs.contains(&c.class_id)))
            .fold([0; 4], |acc, c| {
                [
                    acc[0] + c.pseudo,
                    acc[1] + c.pseudo_matched,
                    acc[2] + c.gts,
                    acc[3] + c.gts_covered,
                ]
            })
    }

    fn index_of(&self, iou_threshold: f64) -> Option<usize> {
        self.iou_grid.iter().position(|&t| t == iou_threshold)
    }

    /// Pooled precision over `classes` at a threshold on the grid; 0 when
    /// there are no pseudo labels.
    pub fn precision_for(&self, classes: &[usize], iou_threshold: f64) -> Option<f64> {
        let [pseudo, matched, _, _] = self.sums(self.index_of(iou_threshold)?, Some(classes));
        Some(if pseudo == 0 { 0.0 } else { matched as f64 / pseudo as f64 })
    }

    /// Pooled recall over `classes` at a threshold on the grid.
    pub fn recall_for(&self, classes: &[usize], iou_threshold: f64) -> Option<f64> {
        let [_, _, gts, covered] = self.sums(self.index_of(iou_threshold)?, Some(classes));
        Some(if gts == 0 { 0.0 } else { covered as f64 / gts as f64 })
    }

    pub fn point(&self, iou_threshold: f64) -> Option<&QualityPoint> {
        self.points.get(self.index_of(iou_threshold)?)
    }
}

/// Held-out annotations keyed by image id.
pub type HeldOut = BTreeMap<u64, Vec<(BBox, usize)>>;

/// For each IoU threshold: the fraction of pseudo boxes overlapping any
/// same-class ground truth at that IoU (precision) and the fraction of ground
/// truths overlapped by any same-class pseudo box (recall). Images are those
/// of `pseudo`; each must have held-out annotations.
pub fn pseudo_label_quality(pseudo: &[PseudoLabelSet], heldout: &HeldOut, iou_grid: &[f64]) -> Result<QualityCurve> {
    let num_classes = pseudo
        .iter()
        .flat_map(|s| s.labels.iter().map(|l| l.class_id + 1))
        .chain(heldout.values().flat_map(|g| g.iter().map(|(_, c)| c + 1)))
        .max()
        .unwrap_or(0);
    let mut counts = vec![[0u64; 4]; num_classes * iou_grid.len()];
    let mut sets: Vec<&PseudoLabelSet> = pseudo.iter().collect();
    sets.sort_by_key(|s| s.image_id);
    for set in sets {
        let gts = heldout
            .get(&set.image_id)
            .ok_or(Error::MissingAnnotations(set.image_id))?;
        // Best same-class IoU for each pseudo label and each ground truth.
        let mut best_for_label = vec![0.0f64; set.labels.len()];
        let mut best_for_gt = vec![0.0f64; gts.len()];
        for (i, l) in set.labels.iter().enumerate() {
            for (j, (g, c)) in gts.iter().enumerate() {
                if *c == l.class_id {
                    let x = l.bbox.iou(g);
                    best_for_label[i] = best_for_label[i].max(x);
                    best_for_gt[j] = best_for_gt[j].max(x);
                }
            }
        }
        for (t, &thr) in iou_grid.iter().enumerate() {
            for (l, &best) in set.labels.iter().zip(&best_for_label) {
                let slot = &mut counts[l.class_id * iou_grid.len() + t];
                slot[0] += 1;
                slot[1] += (best >= thr) as u64;
            }
            for ((_, c), &best) in gts.iter().zip(&best_for_gt) {
                let slot = &mut counts[c * iou_grid.len() + t];
                slot[2] += 1;
                slot[3] += (best >= thr) as u64;
            }
        }
    }
    let mut per_class = Vec::new();
    for class_id in 0..num_classes {
        for t in 0..iou_grid.len() {
            let [pseudo, pseudo_matched, gts, gts_covered] = counts[class_id * iou_grid.len() + t];
            per_class.push(ClassQualityCounts {
                class_id,
                threshold_index: t,
                pseudo,
                pseudo_matched,
                gts,
                gts_covered,
            });
        }
    }
    let mut curve = QualityCurve {
        iou_grid: iou_grid.to_vec(),
        points: Vec::new(),
        per_class,
    };
    curve.points = iou_grid
        .iter()
        .enumerate()
        .map(|(t, &thr)| {
            let [pseudo, matched, gts, covered] = curve.sums(t, None);
            QualityPoint {
                iou_threshold: thr,
                precision: if pseudo == 0 { 0.0 } else { matched as f64 / pseudo as f64 },
                recall: if gts == 0 { 0.0 } else { covered as f64 / gts as f64 },
                precision_undefined: pseudo == 0,
            }
        })
        .collect();
    Ok(curve)
}

/// Evaluation summary: AP tables and, when available, pseudo-label quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Vec<ApEntry>,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds 0.50:0.05:0.95.
    pub ap_coco: f64,
    pub quality: Option<QualityCurve>,
}

impl EvalReport {
    pub fn from_detections(preds: &[EvalDetection], gts: &[GroundTruth]) -> Self {
        let thresholds = coco_thresholds();
        let ap = ap_table(preds, gts, &thresholds);
        let per_threshold: Vec<f64> = thresholds.iter().map(|&t| mean_ap(&ap, t)).collect();
        Self {
            ap50: per_threshold[0],
            ap75: per_threshold[5],
            ap_coco: per_threshold.iter().sum::<f64>() / thresholds.len() as f64,
            ap,
            quality: None,
        }
    }

    pub fn with_quality(mut self, quality: QualityCurve) -> Self {
        self.quality = Some(quality);
        self
    }

    /// Rows of `(class, iou_threshold, metric, value)`.
    pub fn rows(&self) -> Vec<(String, String, String, f64)> {
        let fmt = |t: f64| format!("{t:.2}");
        let mut rows = vec![
            ("all".into(), fmt(0.5), "ap".into(), self.ap50),
            ("all".into(), fmt(0.75), "ap".into(), self.ap75),
            ("all".into(), "0.50:0.95".into(), "ap".into(), self.ap_coco),
        ];
        for e in &self.ap {
            rows.push((e.class_id.to_string(), fmt(e.iou_threshold), "ap".into(), e.ap));
        }
        if let Some(q) = &self.quality {
            for p in &q.points {
                rows.push(("all".into(), fmt(p.iou_threshold), "precision".into(), p.precision));
                rows.push(("all".into(), fmt(p.iou_threshold), "recall".into(), p.recall));
                if p.precision_undefined {
                    rows.push(("all".into(), fmt(p.iou_threshold), "precision_undefined".into(), 1.0));
                }
            }
            for c in &q.per_class {
                let thr = fmt(q.iou_grid[c.threshold_index]);
                if c.pseudo > 0 {
                    let prec = c.pseudo_matched as f64 / c.pseudo as f64;
                    rows.push((c.class_id.to_string(), thr.clone(), "precision".into(), prec));
                }
                if c.gts > 0 {
                    let rec = c.gts_covered as f64 / c.gts as f64;
                    rows.push((c.class_id.to_string(), thr, "recall".into(), rec));
                }
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PseudoLabel;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image_id: u64, class_id: usize, bbox: BBox, score: f64) -> EvalDetection {
        EvalDetection {
            image_id,
            class_id,
            bbox,
            score,
        }
    }

    fn gt(image_id: u64, class_id: usize, bbox: BBox) -> GroundTruth {
        GroundTruth {
            image_id,
            class_id,
            bbox,
        }
    }

    /// Independent matcher: at each step, scan all remaining predictions for
    /// the highest score (ties: lower index), then scan every ground truth.
    fn match_oracle(preds: &[(BBox, f64)], gts: &[BBox], thr: f64) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut used_pred = vec![false; preds.len()];
        let mut used_gt = vec![false; gts.len()];
        let mut order = Vec::new();
        let mut matched = Vec::new();
        for _ in 0..preds.len() {
            let mut pick = None;
            for i in 0..preds.len() {
                if !used_pred[i] && pick.is_none_or(|p: usize| preds[i].1 > preds[p].1) {
                    pick = Some(i);
                }
            }
            let p = pick.unwrap();
            used_pred[p] = true;
            let candidates: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&g| !used_gt[g])
                .map(|g| (g, preds[p].0.iou(&gts[g])))
                .filter(|&(_, x)| x >= thr)
                .collect();
            let best_iou = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let g = candidates.iter().find(|c| c.1 == best_iou).map(|c| c.0);
            if let Some(g) = g {
                used_gt[g] = true;
            }
            order.push(p);
            matched.push(g);
        }
        (order, matched)
    }

    fn random_box(rng: &mut CounterRng) -> BBox {
        let x = rng.uniform_in(0.0, 20.0);
        let y = rng.uniform_in(0.0, 20.0);
        b(x, y, x + rng.uniform_in(2.0, 12.0), y + rng.uniform_in(2.0, 12.0))
    }

    #[test]
    fn match_examples() {
        let r = match_detections(&[(b(0., 0., 10., 10.), 0.9)], &[b(0., 0., 10., 10.)], 0.5);
        assert_eq!(r.matched, vec![Some(0)]);
        assert_eq!(r.covered, vec![true]);
        let r = match_detections(&[], &[b(0., 0., 10., 10.), b(5., 5., 9., 9.)], 0.5);
        assert_eq!(r.true_positives(), 0);
        assert_eq!(r.covered, vec![false, false]);
    }

    #[test]
    fn match_agrees_with_oracle() {
        let mut rng = CounterRng::new(99, 0);
        for _ in 0..500 {
            let preds: Vec<(BBox, f64)> = (0..rng.below(7))
                .map(|_| (random_box(&mut rng), (rng.below(4) as f64) / 4.0))
                .collect();
            let gts: Vec<BBox> = (0..rng.below(6)).map(|_| random_box(&mut rng)).collect();
            let thr = [0.1, 0.3, 0.5, 0.75][rng.below(4)];
            let r = match_detections(&preds, &gts, thr);
            let (order, matched) = match_oracle(&preds, &gts, thr);
            assert_eq!(r.order, order);
            assert_eq!(r.matched, matched);
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt(0, 0, b(0., 0., 10., 10.))];
        assert_eq!(average_precision(&[det(0, 0, b(0., 0., 10., 10.), 0.9)], &g, 0.5), 1.0);
        assert_eq!(average_precision(&[], &g, 0.5), 0.0);
        let preds = [
            det(0, 0, b(50., 50., 60., 60.), 0.9),
            det(0, 0, b(0., 0., 10., 10.), 0.8),
        ];
        assert!((average_precision(&preds, &g, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interpolated_ap_hand_cases() {
        // TP, FP, TP with 2 gts: recall 0.5 at precision 1, recall 1 at 2/3.
        let ap = interpolated_ap(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-15);
        // Half the gts found with perfect precision.
        assert!((interpolated_ap(&[true], 2) - 51.0 / 101.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[false, false], 3), 0.0);
        assert_eq!(interpolated_ap(&[true], 0), 0.0);
    }

    #[test]
    fn ap_ignores_classes_without_ground_truth() {
        let g = [gt(0, 0, b(0., 0., 10., 10.))];
        let preds = [
            det(0, 0, b(0., 0., 10., 10.), 0.9),
            det(0, 3, b(0., 0., 10., 10.), 0.99),
        ];
        assert_eq!(average_precision(&preds, &g, 0.5), 1.0);
    }

    #[test]
    fn quality_examples() {
        let boxes = [b(0., 0., 10., 10.), b(20., 20., 40., 30.)];
        let heldout: HeldOut = [(1, vec![(boxes[0], 0), (boxes[1], 2)])].into();
        let label = |bx: BBox, c: usize| PseudoLabel {
            bbox: bx,
            class_id: c,
            p: 1.0,
            v: 1.0,
            combined: 1.0,
        };
        let exact = PseudoLabelSet {
            image_id: 1,
            labels: vec![label(boxes[0], 0), label(boxes[1], 2)],
            alpha: vec![],
            tau_used: vec![],
        };
        let grid = coco_thresholds();
        let q = pseudo_label_quality(std::slice::from_ref(&exact), &heldout, &grid).unwrap();
        assert!(q.points.iter().all(|p| p.precision == 1.0 && p.recall == 1.0));

        let empty = PseudoLabelSet {
            labels: vec![],
            ..exact.clone()
        };
        let q = pseudo_label_quality(&[empty], &heldout, &grid).unwrap();
        assert!(q.points.iter().all(|p| p.precision == 0.0 && p.recall == 0.0 && p.precision_undefined));

        // Shrinking a 10x10 box to 10x8 gives IoU exactly 0.8.
        let shrunk = PseudoLabelSet {
            labels: vec![label(b(0., 0., 10., 8.), 0)],
            ..exact.clone()
        };
        assert_eq!(b(0., 0., 10., 8.).iou(&boxes[0]), 0.8);
        let q = pseudo_label_quality(&[shrunk], &heldout, &[0.75, 0.85]).unwrap();
        assert_eq!(q.points[0].precision, 1.0);
        assert_eq!(q.points[1].precision, 0.0);
        assert_eq!(q.recall_for(&[0], 0.75), Some(1.0));
        assert_eq!(q.recall_for(&[2], 0.75), Some(0.0));

        let missing = PseudoLabelSet {
            image_id: 9,
            ..exact
        };
        assert!(matches!(
            pseudo_label_quality(&[missing], &heldout, &grid),
            Err(Error::MissingAnnotations(9))
        ));
    }

    #[test]
    fn report_rows() {
        let g = [gt(0, 0, b(0., 0., 10., 10.))];
        let r = EvalReport::from_detections(&[det(0, 0, b(0., 0., 10., 10.), 0.9)], &g);
        assert_eq!((r.ap50, r.ap75, r.ap_coco), (1.0, 1.0, 1.0));
        let rows = r.rows();
        assert_eq!(rows.len(), 3 + 10);
        assert_eq!(rows[2].1, "0.50:0.95");
    }

    fn random_instance(seed: u64) -> (Vec<EvalDetection>, Vec<GroundTruth>) {
        let mut rng = CounterRng::new(seed, 17);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for image in 0..3u64 {
            for _ in 0..rng.below(6) {
                let bx = random_box(&mut rng);
                let class_id = rng.below(2);
                gts.push(gt(image, class_id, bx));
                for _ in 0..rng.below(3) {
                    let j = |r: &mut CounterRng| r.uniform_in(-2.0, 2.0);
                    let x1 = bx.x1() + j(&mut rng);
                    let y1 = bx.y1() + j(&mut rng);
                    let p = b(x1, y1, x1.max(bx.x2() + j(&mut rng)) + 0.5, y1.max(bx.y2() + j(&mut rng)) + 0.5);
                    preds.push(det(image, class_id, p, rng.uniform()));
                }
            }
            for _ in 0..rng.below(3) {
                preds.push(det(image, rng.below(2), random_box(&mut rng), rng.uniform()));
            }
        }
        (preds, gts)
    }

    #[test]
    fn ap_nonincreasing_in_iou_threshold() {
        for seed in 0..100 {
            let (preds, gts) = random_instance(seed);
            let a50 = average_precision(&preds, &gts, 0.5);
            let a75 = average_precision(&preds, &gts, 0.75);
            let a95 = average_precision(&preds, &gts, 0.95);
            assert!(a50 >= a75 && a75 >= a95, "seed {seed}: {a50} {a75} {a95}");
        }
    }

    proptest! {
        #[test]
        fn ap_invariant_to_monotone_score_transform(seed in 0u64..500) {
            let (preds, gts) = random_instance(seed);
            let warped: Vec<EvalDetection> = preds
                .iter()
                .map(|d| EvalDetection { score: (3.0 * d.score).exp() - 7.0, ..*d })
                .collect();
            for thr in [0.5, 0.75] {
                prop_assert_eq!(average_precision(&preds, &gts, thr), average_precision(&warped, &gts, thr));
            }
        }

        #[test]
        fn quality_nonincreasing_in_threshold(seed in 0u64..500) {
            let (preds, gts) = random_instance(seed);
            let mut heldout: HeldOut = (0..3).map(|i| (i, vec![])).collect();
            for g in &gts {
                heldout.get_mut(&g.image_id).unwrap().push((g.bbox, g.class_id));
            }
            let sets: Vec<PseudoLabelSet> = (0..3)
                .map(|i| PseudoLabelSet {
                    image_id: i,
                    labels: preds
                        .iter()
                        .filter(|d| d.image_id == i)
                        .map(|d| PseudoLabel { bbox: d.bbox, class_id: d.class_id, p: d.score, v: 1.0, combined: d.score })
                        .collect(),
                    alpha: vec![],
                    tau_used: vec![],
                })
                .collect();
            let q = pseudo_label_quality(&sets, &heldout, &coco_thresholds()).unwrap();
            for w in q.points.windows(2) {
                prop_assert!(w[0].precision >= w[1].precision);
                prop_assert!(w[0].recall >= w[1].recall);
            }
        }
    }
}
