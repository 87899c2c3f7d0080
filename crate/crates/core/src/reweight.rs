//! Closed-form instance weights for the KL-regularized inner maximization.
//!
//! For a batch of per-sample losses `L` and temperature `r > 0` the inner
//! problem
//!
//! ```text
//! max_{w in simplex}  sum_i w_i L_i - r sum_i w_i log(N w_i)
//! ```
//!
//! is solved by the softmax `w_i = exp(L_i / r) / sum_j exp(L_j / r)`, and its
//! optimal value is the tilted risk `r log((1/N) sum_i exp(L_i / r))`.
//! [`oracle_max_weights`] solves the same problem by exponentiated-gradient
//! ascent without using the closed form, so the two can be checked against
//! each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample losses of one batch. All entries are finite and there is at
/// least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("loss vector is empty".into()));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("loss {i} is not finite ({v})")));
        }
        Ok(LossVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<f64>> for LossVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        LossVector::new(values)
    }
}

/// A strictly positive point on the probability simplex together with the
/// temperature that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: Vec<f64>,
    temperature: f64,
}

impl WeightVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.weights
    }
}

/// Solution reported by [`oracle_max_weights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub weights: Vec<f64>,
    /// Inner objective at `weights`.
    pub objective: f64,
    /// Lagrange multiplier of the equality constraint, read off the
    /// stationarity condition `-L_i + r (log w_i + 1) + lambda = 0`.
    pub multiplier: f64,
    pub iterations: usize,
}

/// Exponential moving average of the inner-level function used by the
/// stochastic compositional estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningAverageState {
    pub estimate: f64,
    decay: f64,
}

pub const DEFAULT_RUNNING_AVERAGE_DECAY: f64 = 0.1;

impl RunningAverageState {
    pub fn new(estimate: f64, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "running-average decay must lie in (0, 1], got {decay}"
            )));
        }
        Ok(RunningAverageState { estimate, decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}

fn check_temperature(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {r}"
        )))
    }
}

/// Softmax of `losses / r` with max-subtraction.
///
/// Entries that underflow are floored at `f64::MIN_POSITIVE` so the result
/// stays strictly inside the simplex; the floor moves the sum by less than
/// `N * 2.3e-308`.
pub fn compute_weights(losses: &LossVector, r: f64) -> Result<WeightVector> {
    check_temperature(r)?;
    let max = losses.max();
    let mut weights: Vec<f64> = losses.values().iter().map(|l| ((l - max) / r).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w = (*w / total).max(f64::MIN_POSITIVE);
    }
    Ok(WeightVector {
        weights,
        temperature: r,
    })
}

/// `sum_i w_i L_i - r sum_i w_i log(N w_i)` with `0 log 0 = 0`.
///
/// `weights` must be non-negative and sum to one within `1e-9`; zeros are
/// allowed here (unlike [`WeightVector`]) so one-hot points can be scored.
pub fn inner_objective(losses: &LossVector, weights: &[f64], r: f64) -> Result<f64> {
    check_temperature(r)?;
    if weights.len() != losses.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} losses",
            weights.len(),
            losses.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
    }
    let n = losses.len() as f64;
    let mut linear = 0.0;
    let mut divergence = 0.0;
    for (&l, &w) in losses.values().iter().zip(weights) {
        linear += w * l;
        if w > 0.0 {
            divergence += w * (n * w).ln();
        }
    }
    Ok(linear - r * divergence)
}

/// `r log((1/N) sum_i exp(L_i / r))`, evaluated as a shifted log-sum-exp.
pub fn compositional_objective(losses: &LossVector, r: f64) -> Result<f64> {
    check_temperature(r)?;
    let max = losses.max();
    let sum: f64 = losses.values().iter().map(|l| ((l - max) / r).exp()).sum();
    let n = losses.len() as f64;
    Ok(max + r * (sum.ln() - n.ln()))
}

pub const ORACLE_MAX_ITERATIONS: usize = 10_000;

/// Maximizes the inner objective by exponentiated-gradient ascent.
///
/// Starting from the uniform point, each iteration multiplies `w_i` by
/// `exp(eta * g_i)` with `g_i = L_i - r (log(N w_i) + 1)` the partial
/// derivative of the objective, then renormalizes. The step is
/// `eta = 0.5 / r`, which makes the log-weights contract toward the
/// stationary point by a factor of one half per iteration. Iteration stops
/// once the largest weight change falls below `tol / 10`.
pub fn oracle_max_weights(losses: &LossVector, r: f64, tol: f64) -> Result<OracleResult> {
    oracle_max_weights_capped(losses, r, tol, ORACLE_MAX_ITERATIONS)
}

/// [`oracle_max_weights`] with an explicit iteration cap.
pub fn oracle_max_weights_capped(
    losses: &LossVector,
    r: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<OracleResult> {
    check_temperature(r)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let n = losses.len();
    let nf = n as f64;
    let eta = 0.5 / r;
    let mut w = vec![1.0 / nf; n];
    let mut step = vec![0.0; n];
    let mut iterations = 0;
    let converged = loop {
        if iterations == max_iterations {
            break false;
        }
        iterations += 1;
        for ((s, &l), &wi) in step.iter_mut().zip(losses.values()).zip(&w) {
            let grad = l - r * ((nf * wi).ln() + 1.0);
            *s = eta * grad;
        }
        let shift = step.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (s, &wi) in step.iter_mut().zip(&w) {
            *s = wi * (*s - shift).exp();
            total += *s;
        }
        let mut change: f64 = 0.0;
        for (wi, s) in w.iter_mut().zip(&step) {
            let next = (s / total).max(f64::MIN_POSITIVE);
            change = change.max((next - *wi).abs());
            *wi = next;
        }
        if change < tol / 10.0 {
            break true;
        }
    };

    let (multiplier, residual) = kkt_multiplier(losses.values(), &w, r);
    let result = OracleResult {
        objective: inner_objective(losses, &w, r)?,
        weights: w,
        multiplier,
        iterations,
    };
    if converged {
        Ok(result)
    } else {
        Err(Error::NonConvergence {
            best: Box::new(result),
            residual,
        })
    }
}

/// Mean and spread of `L_i - r (log w_i + 1)`; at a stationary point every
/// entry equals the multiplier.
fn kkt_multiplier(losses: &[f64], weights: &[f64], r: f64) -> (f64, f64) {
    let values: Vec<f64> = losses
        .iter()
        .zip(weights)
        .map(|(l, w)| l - r * (w.ln() + 1.0))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, hi - lo)
}

pub fn update_running_average(state: RunningAverageState, sample_value: f64) -> RunningAverageState {
    RunningAverageState {
        estimate: (1.0 - state.decay) * state.estimate + state.decay * sample_value,
        decay: state.decay,
    }
}
