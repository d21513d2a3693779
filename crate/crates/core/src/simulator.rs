//! Deterministic synthetic teacher-student testbed.
//!
//! Scenes hold long-tailed ground truth; a simulated teacher emits raw
//! candidates (class scores plus interval logits and offsets) whose
//! localization error varies per instance and whose interval confidence
//! tracks that error. Experiments pseudo-label every scene under several
//! ranking/threshold variants and score the labels against the held-out
//! ground truth.
//!
//! All randomness comes from [`CounterRng`] streams keyed by
//! `(seed, scene index, purpose)`, so results do not depend on thread count
//! or scheduling.

use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceSnapshot, ClassBalanceState};
use crate::config::ExperimentConfig;
use crate::data_io::{self, Category, Dataset, ImageInfo};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, ScoreKind};
use crate::interval::{sigmoid, IntervalGrid, IntervalPrediction, Side, NUM_SIDES};
use crate::metrics::{coco_thresholds, pseudo_label_quality, EvalDetection, EvalReport};
use crate::pipeline::{decode_candidates, select_pseudo_labels, PipelineParams, PseudoLabelSet, RawCandidate};
use crate::rng::{stream_id, CounterRng};

const STREAM_SCENE: u64 = 1;
const STREAM_TEACHER: u64 = 2;

/// Scene layout and long-tailed class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_width: f64,
    pub image_height: f64,
    pub num_classes: usize,
    /// Class `m` is drawn with weight `(m + 1)^-imbalance_exponent`.
    pub imbalance_exponent: f64,
    /// Poisson mean of objects per scene.
    pub mean_objects: f64,
    /// Bounds on the geometric-mean side length of an object.
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Aspect ratios are log-uniform in `[1 / max_aspect, max_aspect]`.
    pub max_aspect: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_width: 640.0,
            image_height: 480.0,
            num_classes: 20,
            imbalance_exponent: 1.0,
            mean_objects: 4.0,
            min_object_size: 24.0,
            max_object_size: 192.0,
            max_aspect: 2.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::param("num_classes", "need at least one class"));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::param("image size", "must be positive"));
        }
        if !(self.imbalance_exponent >= 0.0 && self.imbalance_exponent.is_finite()) {
            return Err(Error::param("imbalance_exponent", "must be >= 0"));
        }
        if !(self.mean_objects >= 0.0 && self.mean_objects <= 100.0) {
            return Err(Error::param("mean_objects", "must be in [0, 100]"));
        }
        if !(self.min_object_size > 0.0 && self.min_object_size <= self.max_object_size) {
            return Err(Error::param("object size", "need 0 < min_object_size <= max_object_size"));
        }
        if !(self.max_aspect >= 1.0) {
            return Err(Error::param("max_aspect", "must be >= 1"));
        }
        let longest = self.max_object_size * self.max_aspect.sqrt();
        if longest > self.image_width.min(self.image_height) {
            return Err(Error::param("max_object_size", "objects may not fit in the image"));
        }
        Ok(())
    }

    /// Normalized class frequencies.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.num_classes)
            .map(|m| ((m + 1) as f64).powf(-self.imbalance_exponent))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    fn cumulative_frequencies(&self) -> Vec<f64> {
        self.class_frequencies()
            .iter()
            .scan(0.0, |acc, f| {
                *acc += f;
                Some(*acc)
            })
            .collect()
    }

    /// The rarest tenth of classes (at least one), rarest first.
    pub fn rare_classes(&self) -> Vec<usize> {
        let freq = self.class_frequencies();
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| freq[a].total_cmp(&freq[b]).then(b.cmp(&a)));
        order.truncate(self.num_classes.div_ceil(10));
        order
    }

    fn random_box(&self, rng: &mut CounterRng) -> BBox {
        let size = rng.log_uniform(self.min_object_size, self.max_object_size);
        let aspect = rng.log_uniform(1.0 / self.max_aspect, self.max_aspect).sqrt();
        let w = (size * aspect).min(self.image_width);
        let h = (size / aspect).min(self.image_height);
        let x = rng.uniform() * (self.image_width - w);
        let y = rng.uniform() * (self.image_height - h);
        BBox::new(x, y, (x + w).min(self.image_width), (y + h).min(self.image_height))
            .expect("positive extent inside the image")
    }
}

/// One synthetic image and its ground truth `(box, class)` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: u64,
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<(BBox, usize)>,
}

/// Scene `index` of the experiment rooted at `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64, index: u64) -> Scene {
    let mut rng = CounterRng::new(seed, stream_id(index, STREAM_SCENE));
    let cumulative = spec.cumulative_frequencies();
    let n = rng.poisson(spec.mean_objects);
    let objects = (0..n)
        .map(|_| {
            let class_id = rng.categorical(&cumulative);
            (spec.random_box(&mut rng), class_id)
        })
        .collect();
    Scene {
        index,
        image_id: index + 1,
        width: spec.image_width,
        height: spec.image_height,
        objects,
    }
}

/// How the simulated teacher errs.
///
/// Localization: each detected instance draws a noise scale `sigma`
/// (log-uniform in `[loc_noise_min, loc_noise_max]` when heteroscedastic, their
/// geometric mean otherwise, times `loc_noise_mult`). The teacher perceives each
/// ground-truth side displaced by `N(0, sigma * extent)`. Interval logits peak
/// at the perceived position with height `peak_logit - quality_slope * sigma`
/// and fall off as `temperature * distance^2` in interval units.
///
/// Classification: the confidence logit is
/// `p_logit_max + freq_slope * ln(freq / max_freq) + iou_coupling * (IoU - 0.75)`
/// plus noise, which depresses confidence on rare classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherNoiseModel {
    pub miss_rate: f64,
    /// Poisson mean of extra duplicate candidates per detected object.
    pub duplicate_mean: f64,
    /// Candidate-side displacement, as a fraction of the object extent.
    pub proposal_noise: f64,
    pub heteroscedastic: bool,
    pub loc_noise_min: f64,
    pub loc_noise_max: f64,
    pub loc_noise_mult: f64,
    /// Offset prediction noise in interval widths.
    pub offset_noise: f64,
    pub peak_logit: f64,
    pub quality_slope: f64,
    pub peak_jitter: f64,
    pub temperature: f64,
    pub logit_noise: f64,
    pub p_logit_max: f64,
    pub freq_slope: f64,
    pub iou_coupling: f64,
    pub p_noise: f64,
    /// Probability that a detected object is assigned a wrong class.
    pub confusion_rate: f64,
    pub confusion_penalty: f64,
    /// Fraction of the non-winning probability mass given to background.
    pub background_share: f64,
    /// Poisson mean of false positives per scene.
    pub fp_rate: f64,
    pub fp_logit_mean: f64,
    pub fp_peak_logit: f64,
}

impl Default for TeacherNoiseModel {
    fn default() -> Self {
        Self {
            miss_rate: 0.05,
            duplicate_mean: 0.6,
            proposal_noise: 0.1,
            heteroscedastic: true,
            loc_noise_min: 0.01,
            loc_noise_max: 0.12,
            loc_noise_mult: 1.0,
            offset_noise: 0.1,
            peak_logit: 3.5,
            quality_slope: 30.0,
            peak_jitter: 0.3,
            temperature: 2.0,
            logit_noise: 0.1,
            p_logit_max: 2.5,
            freq_slope: 0.3,
            iou_coupling: 1.0,
            p_noise: 0.5,
            confusion_rate: 0.03,
            confusion_penalty: 1.5,
            background_share: 0.3,
            fp_rate: 0.3,
            fp_logit_mean: -1.0,
            fp_peak_logit: 0.5,
        }
    }
}

impl TeacherNoiseModel {
    /// Perfect teacher: no misses, duplicates, false positives or noise, and
    /// saturated logits.
    pub fn noiseless() -> Self {
        Self {
            miss_rate: 0.0,
            duplicate_mean: 0.0,
            proposal_noise: 0.0,
            heteroscedastic: false,
            loc_noise_min: 0.0,
            loc_noise_max: 0.0,
            offset_noise: 0.0,
            peak_logit: 40.0,
            quality_slope: 0.0,
            peak_jitter: 0.0,
            temperature: 1e6,
            logit_noise: 0.0,
            p_logit_max: 40.0,
            freq_slope: 0.0,
            iou_coupling: 0.0,
            p_noise: 0.0,
            confusion_rate: 0.0,
            fp_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::param(name, format!("{x} not in [0, 1]")))
            }
        };
        unit("miss_rate", self.miss_rate)?;
        unit("confusion_rate", self.confusion_rate)?;
        unit("background_share", self.background_share)?;
        let nonneg = [
            ("duplicate_mean", self.duplicate_mean),
            ("proposal_noise", self.proposal_noise),
            ("loc_noise_min", self.loc_noise_min),
            ("loc_noise_mult", self.loc_noise_mult),
            ("offset_noise", self.offset_noise),
            ("peak_jitter", self.peak_jitter),
            ("temperature", self.temperature),
            ("logit_noise", self.logit_noise),
            ("p_noise", self.p_noise),
            ("fp_rate", self.fp_rate),
        ];
        for (name, x) in nonneg {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::param(name, format!("{x} must be finite and >= 0")));
            }
        }
        if !(self.loc_noise_max >= self.loc_noise_min && self.loc_noise_max.is_finite()) {
            return Err(Error::param("loc_noise_max", "must be >= loc_noise_min"));
        }
        let finite = [
            self.peak_logit,
            self.quality_slope,
            self.p_logit_max,
            self.freq_slope,
            self.iou_coupling,
            self.confusion_penalty,
            self.fp_logit_mean,
            self.fp_peak_logit,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("teacher", "logit parameters must be finite"));
        }
        Ok(())
    }

    fn instance_noise(&self, rng: &mut CounterRng) -> f64 {
        let base = if !self.heteroscedastic || self.loc_noise_min == self.loc_noise_max {
            (self.loc_noise_min * self.loc_noise_max).sqrt()
        } else if self.loc_noise_min > 0.0 {
            rng.log_uniform(self.loc_noise_min, self.loc_noise_max)
        } else {
            rng.uniform_in(self.loc_noise_min, self.loc_noise_max)
        };
        base * self.loc_noise_mult
    }
}

/// Interval logits peaked at `perceived` side coordinates, with per-interval
/// offsets pointing at the perceived coordinate (clamped to the interval).
fn interval_prediction(
    grid: &IntervalGrid,
    perceived: [f64; NUM_SIDES],
    peak: f64,
    noise: &TeacherNoiseModel,
    rng: &mut CounterRng,
) -> IntervalPrediction {
    let k = grid.k();
    let mut pred = IntervalPrediction::filled(k, 0.0, 0.0);
    for side in Side::ALL {
        let s = side.index();
        let seg = grid.segment(side);
        let u = ((perceived[s] - seg.start) / seg.width - 0.5).clamp(0.0, (k - 1) as f64);
        let nearest = (u - u.floor()).min(u.ceil() - u);
        for j in 0..k {
            let d = j as f64 - u;
            let falloff = noise.temperature * (d * d - nearest * nearest);
            pred.logits[s][j] = peak - falloff + noise.logit_noise * rng.normal();
            let offset = ((perceived[s] - seg.center(j)) / seg.width).clamp(-0.5, 0.5);
            pred.offsets[s][j] = offset + noise.offset_noise * rng.normal();
        }
    }
    pred
}

fn class_scores(class_id: usize, p: f64, num_classes: usize, background_share: f64) -> Vec<f64> {
    let rest = 1.0 - p;
    let mut scores = vec![0.0; num_classes + 1];
    let others = num_classes.saturating_sub(1);
    if others > 0 {
        let share = rest * (1.0 - background_share) / others as f64;
        scores[..num_classes].fill(share);
        scores[num_classes] = rest * background_share;
    } else {
        scores[num_classes] = rest;
    }
    scores[class_id] = p;
    scores
}

fn perturb(b: &BBox, frac: f64, rng: &mut CounterRng) -> BBox {
    let (w, h) = (b.width(), b.height());
    for _ in 0..8 {
        let c = [
            b.x1() + frac * w * rng.normal(),
            b.y1() + frac * h * rng.normal(),
            b.x2() + frac * w * rng.normal(),
            b.y2() + frac * h * rng.normal(),
        ];
        if let Ok(p) = BBox::new(c[0], c[1], c[2], c[3]) {
            if p.width() > 0.25 * w && p.height() > 0.25 * h {
                return p;
            }
        }
    }
    *b
}

/// Grid geometry used by the teacher; `k = 1` is plain offset regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridShape {
    pub k: usize,
    pub scale: f64,
}

impl From<&PipelineParams> for GridShape {
    fn from(p: &PipelineParams) -> Self {
        Self { k: p.k, scale: p.scale }
    }
}

/// Raw teacher candidates for one scene.
pub fn simulate_teacher(
    scene: &Scene,
    spec: &SceneSpec,
    noise: &TeacherNoiseModel,
    grid: GridShape,
    seed: u64,
) -> Result<Vec<RawCandidate>> {
    let mut rng = CounterRng::new(seed, stream_id(scene.index, STREAM_TEACHER));
    let m = spec.num_classes;
    let freq = spec.class_frequencies();
    let max_freq = freq.iter().copied().fold(0.0, f64::max);
    let cumulative = spec.cumulative_frequencies();
    let mut out = Vec::new();
    for &(gt, class_id) in &scene.objects {
        if rng.bernoulli(noise.miss_rate) {
            continue;
        }
        let sigma = noise.instance_noise(&mut rng);
        let copies = 1 + rng.poisson(noise.duplicate_mean);
        for _ in 0..copies {
            let candidate = perturb(&gt, noise.proposal_noise, &mut rng);
            let g = IntervalGrid::new(candidate, grid.k, grid.scale)?;
            let corners = gt.corners();
            let perceived: [f64; NUM_SIDES] = std::array::from_fn(|s| {
                let extent = if Side::ALL[s].is_horizontal_axis() {
                    gt.width()
                } else {
                    gt.height()
                };
                corners[s] + sigma * extent * rng.normal()
            });
            let peak = noise.peak_logit - noise.quality_slope * sigma + noise.peak_jitter * rng.normal();
            let prediction = interval_prediction(&g, perceived, peak, noise, &mut rng);

            let mut logit_p = noise.p_logit_max
                + noise.freq_slope * (freq[class_id] / max_freq).ln()
                + noise.iou_coupling * (candidate.iou(&gt) - 0.75)
                + noise.p_noise * rng.normal();
            let mut predicted = class_id;
            if m > 1 && rng.bernoulli(noise.confusion_rate) {
                predicted = (class_id + 1 + rng.below(m - 1)) % m;
                logit_p -= noise.confusion_penalty;
            }
            out.push(RawCandidate {
                candidate,
                class_scores: class_scores(predicted, sigmoid(logit_p), m, noise.background_share),
                prediction,
            });
        }
    }
    for _ in 0..rng.poisson(noise.fp_rate) {
        let candidate = spec.random_box(&mut rng);
        let class_id = rng.categorical(&cumulative);
        let g = IntervalGrid::new(candidate, grid.k, grid.scale)?;
        let corners = candidate.corners();
        let perceived: [f64; NUM_SIDES] = std::array::from_fn(|s| {
            let extent = if Side::ALL[s].is_horizontal_axis() {
                candidate.width()
            } else {
                candidate.height()
            };
            corners[s] + 0.15 * extent * rng.normal()
        });
        let peak = noise.fp_peak_logit + noise.peak_jitter * rng.normal();
        let prediction = interval_prediction(&g, perceived, peak, noise, &mut rng);
        let p = sigmoid(noise.fp_logit_mean + rng.normal());
        out.push(RawCandidate {
            candidate,
            class_scores: class_scores(class_id, p, m, noise.background_share),
            prediction,
        });
    }
    Ok(out)
}

/// Pseudo-labeling strategy compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The configured pipeline.
    Certainty,
    /// Configured thresholds, but rank and filter on `p` alone.
    ClassificationOnly,
    /// Configured ranking/filter score with a fixed threshold.
    FixedThreshold,
    /// Rank and filter on `p` with a fixed threshold.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Certainty,
        Variant::ClassificationOnly,
        Variant::FixedThreshold,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Certainty => "certainty",
            Variant::ClassificationOnly => "classification_only",
            Variant::FixedThreshold => "fixed_threshold",
            Variant::Baseline => "baseline",
        }
    }

    pub fn params(self, base: &PipelineParams) -> PipelineParams {
        match self {
            Variant::Certainty => *base,
            Variant::ClassificationOnly => PipelineParams {
                ranking: ScoreKind::P,
                filter_score: ScoreKind::P,
                ..*base
            },
            Variant::FixedThreshold => PipelineParams {
                balance: base.balance.disabled(),
                ..*base
            },
            Variant::Baseline => base.baseline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub params: PipelineParams,
    pub pseudo_labels: usize,
    /// Pooled pseudo-label precision at IoU 0.5 and 0.85.
    pub precision_50: f64,
    pub precision_85: f64,
    pub recall_50: f64,
    /// Pooled recall over the rare classes at IoU 0.5; `None` without rare
    /// ground truth.
    pub rare_recall_50: Option<f64>,
    /// Pooled precision over the remaining classes at IoU 0.5; `None` without
    /// common-class pseudo labels.
    pub common_precision_50: Option<f64>,
    /// `lambda_u * sum(alpha[class] * loss)` over pseudo labels, using the
    /// teacher's own candidate as the student prediction.
    pub weighted_unsup_loss: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub scenes: usize,
    pub num_classes: usize,
    pub class_frequencies: Vec<f64>,
    pub rare_classes: Vec<usize>,
    pub common_classes: Vec<usize>,
    pub ground_truth_instances: usize,
    pub teacher_detections: usize,
    pub balance: BalanceSnapshot,
    pub variants: Vec<VariantReport>,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Rows of `(class, iou_threshold, metric, value)`; variant metrics are
    /// prefixed `variant/`.
    pub fn rows(&self) -> Vec<(String, String, String, f64)> {
        let mut rows = Vec::new();
        for m in 0..self.num_classes {
            let class = m.to_string();
            rows.push((class.clone(), String::new(), "mass".into(), self.balance.c[m]));
            rows.push((class.clone(), String::new(), "count".into(), self.balance.n[m] as f64));
            rows.push((class.clone(), String::new(), "tau".into(), self.balance.tau[m]));
            rows.push((class, String::new(), "alpha".into(), self.balance.alpha[m]));
        }
        for v in &self.variants {
            let name = v.variant.name();
            let summary = [
                ("0.50", "precision_pooled", v.precision_50),
                ("0.85", "precision_pooled", v.precision_85),
                ("0.50", "recall_pooled", v.recall_50),
                ("", "pseudo_labels", v.pseudo_labels as f64),
                ("", "weighted_unsup_loss", v.weighted_unsup_loss),
            ];
            for (thr, metric, value) in summary {
                rows.push(("all".into(), thr.into(), format!("{name}/{metric}"), value));
            }
            if let Some(r) = v.rare_recall_50 {
                rows.push(("rare".into(), "0.50".into(), format!("{name}/recall"), r));
            }
            if let Some(p) = v.common_precision_50 {
                rows.push(("common".into(), "0.50".into(), format!("{name}/precision"), p));
            }
            for (class, thr, metric, value) in v.eval.rows() {
                rows.push((class, thr, format!("{name}/{metric}"), value));
            }
        }
        rows
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub dataset: Dataset,
    pub pseudo_labels: Vec<(Variant, Vec<PseudoLabelSet>)>,
}

impl ExperimentOutcome {
    pub fn labels(&self, v: Variant) -> Option<&[PseudoLabelSet]> {
        self.pseudo_labels
            .iter()
            .find(|(x, _)| *x == v)
            .map(|(_, s)| s.as_slice())
    }
}

struct SceneResult {
    scene: Scene,
    detections: Vec<Detection>,
    /// Per decoded detection: localization loss of the teacher's candidate
    /// against its own decoded box and the class probabilities.
    losses: Vec<(f64, f64)>,
}

fn build_dataset(spec: &SceneSpec, scenes: &[SceneResult]) -> Result<Dataset> {
    let categories = (0..spec.num_classes)
        .map(|m| Category {
            id: m as u64 + 1,
            name: format!("class_{m}"),
        })
        .collect();
    let images = scenes
        .iter()
        .map(|s| ImageInfo {
            id: s.scene.image_id,
            width: s.scene.width,
            height: s.scene.height,
        })
        .collect();
    let mut annotations = Vec::new();
    for s in scenes {
        for &(bbox, class_id) in &s.scene.objects {
            annotations.push((annotations.len() as u64 + 1, s.scene.image_id, class_id as u64 + 1, bbox));
        }
    }
    Dataset::new(categories, images, annotations)
}

fn process_scene(config: &ExperimentConfig, index: u64) -> Result<SceneResult> {
    let scene = generate_scene(&config.scene, config.seed, index);
    let grid = GridShape::from(&config.pipeline);
    let raw = simulate_teacher(&scene, &config.scene, &config.teacher, grid, config.seed)?;
    let m = config.scene.num_classes;
    let mut detections = Vec::new();
    let mut losses = Vec::new();
    // Decode one candidate at a time to pair each detection with its raw
    // prediction.
    for cand in &raw {
        let decoded = decode_candidates(std::slice::from_ref(cand), m, &config.pipeline)?;
        let Some(det) = decoded.into_iter().next() else {
            continue;
        };
        let g = IntervalGrid::new(cand.candidate, config.pipeline.k, config.pipeline.scale)?;
        let loc = crate::losses::loc_loss(&cand.prediction, &g.encode(&det.bbox), config.bce)?;
        let cls = crate::losses::cls_loss(&cand.class_scores, det.class_id)?;
        detections.push(det);
        losses.push((loc.total, cls));
    }
    Ok(SceneResult {
        scene,
        detections,
        losses,
    })
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Run every [`Variant`] over `config.scenes` simulated images and, when
/// `config.output.dir` is set, write the generated files there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let spec = &config.scene;
    let m = spec.num_classes;
    info!("simulating {} scenes over {} classes (seed {})", config.scenes, m, config.seed);

    let scenes: Vec<SceneResult> = with_pool(config.threads, || {
        (0..config.scenes as u64)
            .into_par_iter()
            .map(|i| process_scene(config, i))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut state = ClassBalanceState::new(m);
    for s in &scenes {
        state.accumulate(&s.detections)?;
    }
    let dataset = build_dataset(spec, &scenes)?;
    let heldout = dataset.heldout();
    let gts = dataset.ground_truths();
    let rare = spec.rare_classes();
    let common: Vec<usize> = (0..m).filter(|c| !rare.contains(c)).collect();
    let grid = coco_thresholds();

    let mut variants = Vec::new();
    let mut pseudo_labels = Vec::new();
    for variant in Variant::ALL {
        let params = variant.params(&config.pipeline);
        let tau = state.thresholds(&params.balance);
        let alpha = state.weights(&params.balance);
        let sets: Vec<PseudoLabelSet> = with_pool(config.threads, || {
            scenes
                .par_iter()
                .map(|s| select_pseudo_labels(s.scene.image_id, &s.detections, &tau, &alpha, &params))
                .collect::<Result<Vec<_>>>()
        })??;

        let mut unsup = Vec::new();
        for (s, set) in scenes.iter().zip(&sets) {
            for (d, &(loc, cls)) in s.detections.iter().zip(&s.losses) {
                if set.labels.iter().any(|l| l.bbox == d.bbox && l.class_id == d.class_id) {
                    unsup.push((crate::losses::LossBreakdown::new(cls, loc, 0.0), d.class_id));
                }
            }
        }
        let weighted_unsup_loss = crate::losses::total_loss(&[], &unsup, config.lambda_u, &alpha)?;

        let quality = pseudo_label_quality(&sets, &heldout, &grid)?;
        let preds: Vec<EvalDetection> = sets
            .iter()
            .flat_map(|s| {
                s.labels.iter().map(move |l| EvalDetection {
                    image_id: s.image_id,
                    class_id: l.class_id,
                    bbox: l.bbox,
                    score: l.score(params.ranking),
                })
            })
            .collect();
        let point = |t: f64| quality.point(t).copied().expect("threshold on grid");
        let report = VariantReport {
            variant,
            params,
            pseudo_labels: preds.len(),
            precision_50: point(0.5).precision,
            precision_85: point(0.85).precision,
            recall_50: point(0.5).recall,
            rare_recall_50: quality.recall_for(&rare, 0.5),
            common_precision_50: quality.precision_for(&common, 0.5),
            weighted_unsup_loss,
            eval: EvalReport::from_detections(&preds, &gts).with_quality(quality),
        };
        debug!(
            "{}: {} labels, precision@0.85 {:.4}, rare recall {:?}",
            variant.name(),
            report.pseudo_labels,
            report.precision_85,
            report.rare_recall_50
        );
        variants.push(report);
        pseudo_labels.push((variant, sets));
    }

    let report = ExperimentReport {
        seed: config.seed,
        scenes: config.scenes,
        num_classes: m,
        class_frequencies: spec.class_frequencies(),
        rare_classes: rare,
        common_classes: common,
        ground_truth_instances: gts.len(),
        teacher_detections: scenes.iter().map(|s| s.detections.len()).sum(),
        balance: state.snapshot(&config.pipeline.balance),
        variants,
    };
    let outcome = ExperimentOutcome {
        report,
        dataset,
        pseudo_labels,
    };
    if let Some(dir) = &config.output.dir {
        write_outcome(&outcome, config, dir)?;
    }
    Ok(outcome)
}

/// Write `report.json`, `report.csv`, `balance.json` and, as configured,
/// `dataset.json` and `pseudo_<variant>.json` into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data_io::write_json(&outcome.report, dir.join("report.json"))?;
    data_io::write_csv_rows(&outcome.report.rows(), dir.join("report.csv"))?;
    data_io::write_json(&outcome.report.balance, dir.join("balance.json"))?;
    if config.output.write_dataset {
        data_io::write_dataset(&outcome.dataset, dir.join("dataset.json"))?;
    }
    if config.output.write_detections {
        let ids: Vec<u64> = outcome.dataset.categories().iter().map(|c| c.id).collect();
        for (variant, sets) in &outcome.pseudo_labels {
            data_io::write_detections(sets, &ids, dir.join(format!("pseudo_{}.json", variant.name())))?;
        }
    }
    Ok(())
}
