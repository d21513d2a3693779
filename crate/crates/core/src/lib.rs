//! Certainty-aware pseudo-labeling for semi-supervised object detection.
//!
//! Box sides are localized by interval classification plus in-interval
//! regression, which yields a localization quality `v` next to the class
//! confidence `p`. Pseudo labels are ranked and filtered on both, with
//! per-class thresholds and loss weights derived from accumulated confidence
//! to favor underrepresented classes.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod config;
pub mod data_io;
pub mod error;
pub mod geometry;
pub mod interval;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod simulator;

pub use balance::{BalanceParams, BalanceSnapshot, ClassBalanceState};
pub use config::ExperimentConfig;
pub use data_io::{Dataset, DetectionRecord};
pub use error::{Error, Result};
pub use geometry::{iou, nms, BBox, Detection, ScoreKind};
pub use interval::{build_grid, IntervalGrid, IntervalPrediction, IntervalTargets};
pub use losses::{BceVariant, LossBreakdown, LossGradient};
pub use metrics::{average_precision, EvalReport, MatchResult};
pub use pipeline::{generate_pseudo_labels, PipelineParams, PseudoLabel, PseudoLabelSet, RawCandidate};
pub use simulator::{run_experiment, ExperimentReport, SceneSpec, TeacherNoiseModel, Variant};
