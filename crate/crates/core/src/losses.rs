//! Interval classification / offset regression losses with analytic
//! gradients, and a central finite-difference harness to verify them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{sigmoid, IntervalPrediction, IntervalTargets, NUM_SIDES};
use crate::rng::CounterRng;

const LOG_FLOOR: f64 = 1e-12;

/// How the interval classification term treats unlabeled intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BceVariant {
    /// Binary cross-entropy with both the positive and negative terms.
    #[default]
    Full,
    /// Only `-y log sigmoid(t)`; unlabeled intervals contribute nothing.
    PositiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub seg: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, seg: f64, reg: f64) -> Self {
        Self {
            cls,
            seg,
            reg,
            total: cls + seg + reg,
        }
    }

    pub fn with_cls(self, cls: f64) -> Self {
        Self::new(cls, self.seg, self.reg)
    }
}

/// Gradient of the localization loss with respect to an [`IntervalPrediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGradient {
    pub d_logits: [Vec<f64>; NUM_SIDES],
    pub d_offsets: [Vec<f64>; NUM_SIDES],
}

fn check_shapes(pred: &IntervalPrediction, tgt: &IntervalTargets) -> Result<()> {
    let k = pred.k();
    for s in 0..NUM_SIDES {
        if pred.logits[s].len() != k || pred.offsets[s].len() != k {
            return Err(Error::Shape(format!("side {s} has ragged prediction")));
        }
        if tgt.labels[s] >= k {
            return Err(Error::Shape(format!(
                "side {s} label {} out of range for {k} intervals",
                tgt.labels[s]
            )));
        }
    }
    Ok(())
}

fn neg_log(x: f64) -> f64 {
    -x.max(LOG_FLOOR).ln()
}

/// Interval classification loss summed over the four sides.
pub fn seg_loss(pred: &IntervalPrediction, tgt: &IntervalTargets, variant: BceVariant) -> Result<f64> {
    check_shapes(pred, tgt)?;
    let mut loss = 0.0;
    for s in 0..NUM_SIDES {
        for (k, &t) in pred.logits[s].iter().enumerate() {
            let y = tgt.y(s, k);
            loss += y * neg_log(sigmoid(t));
            if variant == BceVariant::Full {
                loss += (1.0 - y) * neg_log(sigmoid(-t));
            }
        }
    }
    Ok(loss)
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 offset loss on the labeled interval of each side.
pub fn reg_loss(pred: &IntervalPrediction, tgt: &IntervalTargets) -> Result<f64> {
    check_shapes(pred, tgt)?;
    Ok((0..NUM_SIDES)
        .map(|s| smooth_l1(pred.offsets[s][tgt.labels[s]] - tgt.offsets[s]))
        .sum())
}

pub fn loc_loss(pred: &IntervalPrediction, tgt: &IntervalTargets, variant: BceVariant) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(0.0, seg_loss(pred, tgt, variant)?, reg_loss(pred, tgt)?))
}

pub fn loc_loss_grad(pred: &IntervalPrediction, tgt: &IntervalTargets, variant: BceVariant) -> Result<LossGradient> {
    check_shapes(pred, tgt)?;
    let k = pred.k();
    let mut grad = LossGradient {
        d_logits: std::array::from_fn(|_| vec![0.0; k]),
        d_offsets: std::array::from_fn(|_| vec![0.0; k]),
    };
    for s in 0..NUM_SIDES {
        for (j, &t) in pred.logits[s].iter().enumerate() {
            let y = tgt.y(s, j);
            grad.d_logits[s][j] = match variant {
                BceVariant::Full => sigmoid(t) - y,
                BceVariant::PositiveOnly => y * (sigmoid(t) - 1.0),
            };
        }
        let label = tgt.labels[s];
        grad.d_offsets[s][label] = smooth_l1_grad(pred.offsets[s][label] - tgt.offsets[s]);
    }
    Ok(grad)
}

/// Cross-entropy of a class-probability vector against `target`.
pub fn cls_loss(class_probs: &[f64], target: usize) -> Result<f64> {
    let p = class_probs.get(target).ok_or(Error::UnknownClass {
        class_id: target,
        num_classes: class_probs.len(),
    })?;
    Ok(neg_log(*p))
}

/// `sum(sup.total) + lambda_u * sum(alpha[class] * unsup.total)`.
pub fn total_loss(
    sup: &[LossBreakdown],
    unsup: &[(LossBreakdown, usize)],
    lambda_u: f64,
    alpha: &[f64],
) -> Result<f64> {
    if !(lambda_u >= 0.0) {
        return Err(Error::param("lambda_u", format!("{lambda_u} must be >= 0")));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::param("alpha", format!("weight {a} must be > 0")));
    }
    let supervised: f64 = sup.iter().map(|l| l.total).sum();
    let mut unsupervised = 0.0;
    for (loss, class_id) in unsup {
        let a = alpha.get(*class_id).ok_or(Error::UnknownClass {
            class_id: *class_id,
            num_classes: alpha.len(),
        })?;
        unsupervised += a * loss.total;
    }
    Ok(supervised + lambda_u * unsupervised)
}

/// Result of comparing analytic gradients to central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error with an absolute floor: differences at or below `abs_tol`
/// count as zero.
pub fn relative_error(analytic: f64, numeric: f64, abs_tol: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_tol {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Copy)]
enum Param {
    Logit,
    Offset,
}

impl Param {
    fn slot(self, pred: &mut IntervalPrediction, s: usize, j: usize) -> &mut f64 {
        match self {
            Param::Logit => &mut pred.logits[s][j],
            Param::Offset => &mut pred.offsets[s][j],
        }
    }
}

/// Compare [`loc_loss_grad`] to central differences of [`loc_loss`] with step
/// `h` for every logit and offset of one instance.
pub fn check_instance(
    pred: &IntervalPrediction,
    tgt: &IntervalTargets,
    variant: BceVariant,
    h: f64,
) -> Result<GradCheckReport> {
    let grad = loc_loss_grad(pred, tgt, variant)?;
    let f = |p: &IntervalPrediction| loc_loss(p, tgt, variant).map(|l| l.total);
    let mut work = pred.clone();
    let mut report = GradCheckReport {
        instances: 1,
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for s in 0..NUM_SIDES {
        for j in 0..pred.k() {
            for which in [Param::Logit, Param::Offset] {
                let analytic = match which {
                    Param::Logit => grad.d_logits[s][j],
                    Param::Offset => grad.d_offsets[s][j],
                };
                let orig = *which.slot(&mut work, s, j);
                *which.slot(&mut work, s, j) = orig + h;
                let plus = f(&work)?;
                *which.slot(&mut work, s, j) = orig - h;
                let minus = f(&work)?;
                *which.slot(&mut work, s, j) = orig;
                let numeric = (plus - minus) / (2.0 * h);
                report.entries += 1;
                report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
                report.max_rel_error = report
                    .max_rel_error
                    .max(relative_error(analytic, numeric, 1e-8));
            }
        }
    }
    Ok(report)
}

/// A random instance away from the Smooth-L1 kinks at `|residual| = 1`, so
/// central differences with small `h` are well defined.
pub fn random_instance(rng: &mut CounterRng, k: usize) -> (IntervalPrediction, IntervalTargets) {
    let mut pred = IntervalPrediction::filled(k, 0.0, 0.0);
    let mut labels = [0; NUM_SIDES];
    let mut offsets = [0.0; NUM_SIDES];
    for s in 0..NUM_SIDES {
        labels[s] = rng.below(k);
        offsets[s] = rng.uniform_in(-0.5, 0.5);
        for j in 0..k {
            pred.logits[s][j] = rng.uniform_in(-6.0, 6.0);
            let residual = loop {
                let r = rng.uniform_in(-2.5, 2.5);
                if (r.abs() - 1.0).abs() > 0.01 {
                    break r;
                }
            };
            pred.offsets[s][j] = offsets[s] + residual;
        }
    }
    (pred, IntervalTargets { labels, offsets })
}

/// Gradient check over `instances` random instances per interval count.
pub fn run_grad_check(
    seed: u64,
    instances: usize,
    ks: &[usize],
    variant: BceVariant,
    h: f64,
) -> Result<GradCheckReport> {
    let mut total = GradCheckReport {
        instances: 0,
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for &k in ks {
        let mut rng = CounterRng::new(seed, k as u64);
        for _ in 0..instances {
            let (pred, tgt) = random_instance(&mut rng, k);
            let r = check_instance(&pred, &tgt, variant, h)?;
            total.instances += 1;
            total.entries += r.entries;
            total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
            total.max_abs_error = total.max_abs_error.max(r.max_abs_error);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn targets(labels: [usize; 4], offsets: [f64; 4]) -> IntervalTargets {
        IntervalTargets { labels, offsets }
    }

    /// Scalar BCE in logit space: softplus(t) - y t.
    fn bce_oracle(t: f64, y: f64) -> f64 {
        let softplus = t.max(0.0) + (-t.abs()).exp().ln_1p();
        softplus - y * t
    }

    #[test]
    fn seg_loss_saturated_is_zero() {
        let tgt = targets([1, 0, 2, 3], [0.0; 4]);
        let mut pred = IntervalPrediction::filled(4, -40.0, 0.0);
        for s in 0..4 {
            pred.logits[s][tgt.labels[s]] = 40.0;
        }
        assert!(seg_loss(&pred, &tgt, BceVariant::Full).unwrap() < 1e-9);
    }

    #[test]
    fn seg_loss_at_zero_logits() {
        let tgt = targets([0, 1, 0, 1], [0.0; 4]);
        let pred = IntervalPrediction::filled(2, 0.0, 0.0);
        let l = seg_loss(&pred, &tgt, BceVariant::Full).unwrap();
        assert!((l - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 5.5452).abs() < 1e-4);
        let pos = seg_loss(&pred, &tgt, BceVariant::PositiveOnly).unwrap();
        assert!((pos - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_matches_scalar_oracle() {
        let mut rng = CounterRng::new(11, 0);
        for _ in 0..200 {
            let k = 2 + rng.below(30);
            let (pred, tgt) = random_instance(&mut rng, k);
            let mut oracle = 0.0;
            for s in 0..4 {
                for j in 0..k {
                    oracle += bce_oracle(pred.logits[s][j], tgt.y(s, j));
                }
            }
            let l = seg_loss(&pred, &tgt, BceVariant::Full).unwrap();
            assert!((l - oracle).abs() <= 1e-12 * oracle.max(1.0), "{l} vs {oracle}");
        }
    }

    #[test]
    fn reg_loss_examples() {
        let tgt = targets([0, 1, 2, 0], [0.1, -0.2, 0.3, 0.0]);
        let mut pred = IntervalPrediction::filled(3, 0.0, 0.0);
        for s in 0..4 {
            pred.offsets[s][tgt.labels[s]] = tgt.offsets[s];
        }
        assert_eq!(reg_loss(&pred, &tgt).unwrap(), 0.0);

        // Unlabeled intervals never contribute.
        pred.offsets[0][2] = 100.0;
        assert_eq!(reg_loss(&pred, &tgt).unwrap(), 0.0);

        pred.offsets[1][1] = -0.2 + 0.5;
        assert!((reg_loss(&pred, &tgt).unwrap() - 0.125).abs() < 1e-15);
        pred.offsets[1][1] = -0.2 + 2.0;
        assert!((reg_loss(&pred, &tgt).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn loc_loss_is_additive() {
        let tgt = targets([0, 1, 0, 1], [0.0; 4]);
        let mut pred = IntervalPrediction::filled(2, 0.0, 0.0);
        pred.offsets[0][0] = 2.0;
        let l = loc_loss(&pred, &tgt, BceVariant::Full).unwrap();
        assert_eq!(l.cls, 0.0);
        assert!((l.seg - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 1.5);
        assert_eq!(l.total, l.seg + l.reg);
    }

    #[test]
    fn gradient_examples() {
        let tgt = targets([0, 0, 0, 0], [0.0; 4]);
        let pred = IntervalPrediction::filled(2, 0.0, 0.0);
        let g = loc_loss_grad(&pred, &tgt, BceVariant::Full).unwrap();
        assert_eq!(g.d_logits[0][0], -0.5);
        assert_eq!(g.d_logits[0][1], 0.5);
        assert_eq!(g.d_offsets[0][0], 0.0);
        let g = loc_loss_grad(&pred, &tgt, BceVariant::PositiveOnly).unwrap();
        assert_eq!(g.d_logits[0][1], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for variant in [BceVariant::Full, BceVariant::PositiveOnly] {
            let r = run_grad_check(5, 100, &[2, 8, 30], variant, 1e-4).unwrap();
            assert_eq!(r.instances, 300);
            assert!(r.max_rel_error < 1e-5, "{variant:?}: {r:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let tgt = targets([5, 0, 0, 0], [0.0; 4]);
        let pred = IntervalPrediction::filled(3, 0.0, 0.0);
        assert!(seg_loss(&pred, &tgt, BceVariant::Full).is_err());
        assert!(reg_loss(&pred, &tgt).is_err());
        assert!(loc_loss_grad(&pred, &tgt, BceVariant::Full).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let sup = [LossBreakdown::new(0.0, 0.6, 0.4)];
        let unsup = [(LossBreakdown::new(0.5, 1.0, 0.5), 1)];
        assert_eq!(total_loss(&sup, &unsup, 0.0, &[1.0, 1.5]).unwrap(), 1.0);
        assert_eq!(total_loss(&sup, &unsup, 1.0, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(total_loss(&sup, &unsup, 1.0, &[1.0, 1.5]).unwrap(), 4.0);
        assert!(matches!(
            total_loss(&sup, &unsup, 1.0, &[1.0]),
            Err(Error::UnknownClass { class_id: 1, .. })
        ));
        assert!(total_loss(&sup, &unsup, -1.0, &[1.0, 1.0]).is_err());
        assert!(total_loss(&sup, &unsup, 1.0, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cls_loss_values() {
        assert!((cls_loss(&[0.25, 0.75], 1).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((cls_loss(&[0.0, 1.0], 0).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(cls_loss(&[1.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn losses_nonnegative(seed in 0u64..1000, k in 2usize..12) {
            let mut rng = CounterRng::new(seed, 0);
            let (pred, tgt) = random_instance(&mut rng, k);
            prop_assert!(seg_loss(&pred, &tgt, BceVariant::Full).unwrap() >= 0.0);
            prop_assert!(reg_loss(&pred, &tgt).unwrap() >= 0.0);
        }

        #[test]
        fn seg_loss_midpoint_convex(a in -20.0..20.0f64, c in -20.0..20.0f64, y in 0usize..2) {
            let tgt = targets([y; 4], [0.0; 4]);
            let at = |t: f64| {
                let mut p = IntervalPrediction::filled(2, 0.0, 0.0);
                p.logits[2][1] = t;
                seg_loss(&p, &tgt, BceVariant::Full).unwrap()
            };
            let mid = at(0.5 * (a + c));
            prop_assert!(mid <= 0.5 * (at(a) + at(c)) + 1e-12);
        }

        #[test]
        fn total_loss_linear_in_lambda(lambda in 0.0..5.0f64, alpha in 0.1..5.0f64) {
            let sup = [LossBreakdown::new(0.1, 0.2, 0.3)];
            let unsup = [(LossBreakdown::new(0.4, 0.5, 0.6), 0)];
            let base = total_loss(&sup, &unsup, 0.0, &[alpha]).unwrap();
            let one = total_loss(&sup, &unsup, 1.0, &[alpha]).unwrap();
            let got = total_loss(&sup, &unsup, lambda, &[alpha]).unwrap();
            prop_assert!((got - (base + lambda * (one - base))).abs() < 1e-12);
            let doubled = total_loss(&sup, &unsup, lambda, &[2.0 * alpha]).unwrap();
            prop_assert!((doubled - base - 2.0 * (got - base)).abs() < 1e-12);
        }
    }
}
