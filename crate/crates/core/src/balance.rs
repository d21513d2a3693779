//! Per-class confidence accumulation, dynamic thresholds and loss weights.
//!
//! For class `m` with accumulated confidence mass `c_m = sum(p * v)` and mean
//! foreground count `n̄ = sum(n) / M`:
//!
//! ```text
//! tau_m   = clamp((c_m / n̄)^gamma1 * tau, clip_lo, clip_hi)
//! alpha_m = min((n̄ / c_m)^gamma2, alpha_cap)
//! ```
//!
//! `gamma1 = 0` yields the fixed threshold `tau` (clamped) for every class and
//! `gamma2 = 0` yields unit weights. Otherwise a class with no mass gets
//! `clip_lo` and `alpha_cap`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceParams {
    pub tau: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub alpha_cap: f64,
}

impl Default for BalanceParams {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma1: 0.05,
            gamma2: 0.6,
            clip_lo: 0.4,
            clip_hi: 0.9,
            alpha_cap: 10.0,
        }
    }
}

impl BalanceParams {
    /// Fixed-threshold, unit-weight configuration.
    pub fn disabled(self) -> Self {
        Self {
            gamma1: 0.0,
            gamma2: 0.0,
            ..self
        }
    }

    pub fn is_dynamic(&self) -> bool {
        self.gamma1 != 0.0 || self.gamma2 != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi < 1.0) {
            return Err(Error::param(
                "clip",
                format!("need 0 < clip_lo < clip_hi < 1, got [{}, {}]", self.clip_lo, self.clip_hi),
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param("tau", format!("{} not in (0, 1)", self.tau)));
        }
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return Err(Error::param("gamma1", format!("{} must be >= 0", self.gamma1)));
        }
        if !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return Err(Error::param("gamma2", format!("{} must be >= 0", self.gamma2)));
        }
        if !(self.alpha_cap >= 1.0 && self.alpha_cap.is_finite()) {
            return Err(Error::param("alpha_cap", format!("{} must be >= 1", self.alpha_cap)));
        }
        Ok(())
    }
}

/// Threshold for one class given its mass and the mean per-class count.
pub fn class_threshold(mass: f64, mean_count: f64, params: &BalanceParams) -> f64 {
    if params.gamma1 == 0.0 {
        return params.tau.clamp(params.clip_lo, params.clip_hi);
    }
    if mean_count <= 0.0 || mass <= 0.0 {
        return params.clip_lo;
    }
    ((mass / mean_count).powf(params.gamma1) * params.tau).clamp(params.clip_lo, params.clip_hi)
}

/// Loss weight for one class given its mass and the mean per-class count.
pub fn class_weight(mass: f64, mean_count: f64, params: &BalanceParams) -> f64 {
    if params.gamma2 == 0.0 {
        return 1.0;
    }
    if mean_count <= 0.0 || mass <= 0.0 {
        return params.alpha_cap;
    }
    (mean_count / mass).powf(params.gamma2).min(params.alpha_cap)
}

/// Accumulated `sum(p * v)` and foreground counts per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalanceState {
    c: Vec<f64>,
    n: Vec<u64>,
}

impl ClassBalanceState {
    pub fn new(num_classes: usize) -> Self {
        Self {
            c: vec![0.0; num_classes],
            n: vec![0; num_classes],
        }
    }

    /// State with the given masses and counts; `c[m] <= n[m]` is required.
    pub fn from_parts(c: Vec<f64>, n: Vec<u64>) -> Result<Self> {
        if c.len() != n.len() {
            return Err(Error::Shape(format!("{} masses vs {} counts", c.len(), n.len())));
        }
        for (m, (&cm, &nm)) in c.iter().zip(&n).enumerate() {
            if !(cm >= 0.0 && cm <= nm as f64) {
                return Err(Error::InvalidRecord {
                    record: format!("class {m}"),
                    reason: format!("mass {cm} outside [0, count {nm}]"),
                });
            }
        }
        Ok(Self { c, n })
    }

    pub fn num_classes(&self) -> usize {
        self.c.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.c
    }

    pub fn counts(&self) -> &[u64] {
        &self.n
    }

    pub fn mean_count(&self) -> f64 {
        if self.n.is_empty() {
            return 0.0;
        }
        self.n.iter().sum::<u64>() as f64 / self.n.len() as f64
    }

    /// Add `p * v` and one count per detection. Fails without modifying the
    /// state if any class id is out of range.
    pub fn accumulate<'a, I>(&mut self, dets: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a Detection>,
        I::IntoIter: Clone,
    {
        let dets = dets.into_iter();
        if let Some(d) = dets.clone().find(|d| d.class_id >= self.c.len()) {
            return Err(Error::UnknownClass {
                class_id: d.class_id,
                num_classes: self.c.len(),
            });
        }
        for d in dets {
            self.c[d.class_id] += d.combined();
            self.n[d.class_id] += 1;
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&mut self, other: &ClassBalanceState) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "cannot merge states over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b;
        }
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        Ok(())
    }

    pub fn thresholds(&self, params: &BalanceParams) -> Vec<f64> {
        let mean = self.mean_count();
        self.c.iter().map(|&c| class_threshold(c, mean, params)).collect()
    }

    pub fn weights(&self, params: &BalanceParams) -> Vec<f64> {
        let mean = self.mean_count();
        self.c.iter().map(|&c| class_weight(c, mean, params)).collect()
    }

    pub fn snapshot(&self, params: &BalanceParams) -> BalanceSnapshot {
        BalanceSnapshot {
            c: self.c.clone(),
            n: self.n.clone(),
            tau: self.thresholds(params),
            alpha: self.weights(params),
        }
    }
}

/// Functional form of [`ClassBalanceState::accumulate`].
pub fn accumulate(mut state: ClassBalanceState, dets: &[Detection]) -> Result<ClassBalanceState> {
    state.accumulate(dets)?;
    Ok(state)
}

/// Per-class mass, count, threshold and weight, as written to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSnapshot {
    pub c: Vec<f64>,
    pub n: Vec<u64>,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Exponentially decayed accumulation across batches, for online schedules.
/// Each [`observe`](Self::observe) first scales all previous mass and counts
/// by `decay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayingBalance {
    decay: f64,
    c: Vec<f64>,
    n: Vec<f64>,
}

impl DecayingBalance {
    pub fn new(num_classes: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::param("decay", format!("{decay} not in (0, 1]")));
        }
        Ok(Self {
            decay,
            c: vec![0.0; num_classes],
            n: vec![0.0; num_classes],
        })
    }

    pub fn observe(&mut self, batch: &[Detection]) -> Result<()> {
        if let Some(d) = batch.iter().find(|d| d.class_id >= self.c.len()) {
            return Err(Error::UnknownClass {
                class_id: d.class_id,
                num_classes: self.c.len(),
            });
        }
        self.c.iter_mut().for_each(|x| *x *= self.decay);
        self.n.iter_mut().for_each(|x| *x *= self.decay);
        for d in batch {
            self.c[d.class_id] += d.combined();
            self.n[d.class_id] += 1.0;
        }
        Ok(())
    }

    fn mean_count(&self) -> f64 {
        if self.n.is_empty() {
            0.0
        } else {
            self.n.iter().sum::<f64>() / self.n.len() as f64
        }
    }

    pub fn thresholds(&self, params: &BalanceParams) -> Vec<f64> {
        let mean = self.mean_count();
        self.c.iter().map(|&c| class_threshold(c, mean, params)).collect()
    }

    pub fn weights(&self, params: &BalanceParams) -> Vec<f64> {
        let mean = self.mean_count();
        self.c.iter().map(|&c| class_weight(c, mean, params)).collect()
    }
}
