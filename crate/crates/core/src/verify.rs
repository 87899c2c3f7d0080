//! Property suite behind `irdro verify-math`.
//!
//! Each property runs over seeded random instances and reports the largest
//! error seen plus the first failing input. The weight function under test
//! is a parameter so the suite can be pointed at a deliberately broken
//! implementation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_backward, forward_loss, next_token_distribution, ModelConfig, ModelParams, Sample};
use crate::reweight::{compositional_objective, compute_weights, inner_objective, oracle_max_weights, LossVector};

pub type WeightFn = fn(&LossVector, f64) -> Result<Vec<f64>>;

/// The library's closed-form weights.
pub fn closed_form(losses: &LossVector, r: f64) -> Result<Vec<f64>> {
    Ok(compute_weights(losses, r)?.into_inner())
}

pub const TEMPERATURES: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub instances: usize,
    pub simplex_points: usize,
    pub gradient_pairs: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            instances: 1000,
            simplex_points: 100,
            gradient_pairs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub witness: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<20} max_error={:.3e} tolerance={:.0e} trials={} failures={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.trials,
            self.failures
        )?;
        if let Some(w) = &self.witness {
            write!(f, "\n     witness: {w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    /// `Err(Verification)` naming every failed property.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<&str> = self
            .properties
            .iter()
            .filter(|p| !p.passed())
            .map(|p| p.name)
            .collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(Error::Verification(format!("failed properties: {}", failed.join(", "))))
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            writeln!(f, "{p}")?;
        }
        let failed = self.properties.iter().filter(|p| !p.passed()).count();
        write!(f, "{} properties, {} failed", self.properties.len(), failed)
    }
}

/// Accumulates one property's outcome.
struct Tally {
    result: PropertyResult,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tally {
            result: PropertyResult {
                name,
                trials: 0,
                failures: 0,
                max_error: 0.0,
                tolerance,
                witness: None,
            },
        }
    }

    /// Records one trial; `error` is compared against the tolerance
    /// (`NaN` counts as failure).
    fn check(&mut self, error: f64, witness: impl FnOnce() -> String) {
        self.result.trials += 1;
        let err = if error.is_nan() { f64::INFINITY } else { error };
        self.result.max_error = self.result.max_error.max(err);
        if !(err < self.result.tolerance) {
            self.fail(witness);
        }
    }

    fn fail(&mut self, witness: impl FnOnce() -> String) {
        self.result.failures += 1;
        if self.result.witness.is_none() {
            self.result.witness = Some(witness());
        }
    }

    /// A trial that errored out before producing a number.
    fn error(&mut self, e: &Error, witness: impl FnOnce() -> String) {
        self.result.trials += 1;
        self.result.max_error = f64::INFINITY;
        let msg = e.to_string();
        self.fail(|| format!("{}: {msg}", witness()));
    }

    fn finish(self) -> PropertyResult {
        self.result
    }
}

/// One random reweighting instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub losses: Vec<f64>,
    pub r: f64,
}

impl Instance {
    fn describe(&self) -> String {
        let shown: Vec<String> = self.losses.iter().take(8).map(|l| format!("{l:.17}")).collect();
        let more = if self.losses.len() > 8 { ", ..." } else { "" };
        format!(
            "instance {} N={} r={} losses=[{}{more}]",
            self.index,
            self.losses.len(),
            self.r,
            shown.join(", ")
        )
    }

    fn vector(&self) -> LossVector {
        LossVector::new(self.losses.clone()).expect("generated losses are finite")
    }
}

/// `N` uniform in `2..=64`, losses U[0, 10], `r` cycling through
/// [`TEMPERATURES`].
pub fn random_instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|index| {
            let n = rng.gen_range(2..=64);
            Instance {
                index,
                losses: (0..n).map(|_| rng.gen_range(0.0..10.0)).collect(),
                r: TEMPERATURES[index % TEMPERATURES.len()],
            }
        })
        .collect()
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Uniform point on the simplex (normalized exponentials).
fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

pub fn oracle_agreement(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("oracle_agreement", 1e-6);
    for inst in instances {
        let l = inst.vector();
        match (weights(&l, inst.r), oracle_max_weights(&l, inst.r, 1e-9)) {
            (Ok(w), Ok(o)) if w.len() == o.weights.len() => {
                t.check(inf_norm(&w, &o.weights), || inst.describe())
            }
            (Ok(_), Ok(_)) => t.fail(|| format!("{}: length mismatch", inst.describe())),
            (Err(e), _) | (_, Err(e)) => t.error(&e, || inst.describe()),
        }
    }
    t.finish()
}

pub fn objective_identity(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("objective_identity", 1e-9);
    for inst in instances {
        let l = inst.vector();
        let value = weights(&l, inst.r).and_then(|w| {
            Ok((inner_objective(&l, &w, inst.r)? - compositional_objective(&l, inst.r)?).abs())
        });
        match value {
            Ok(err) => t.check(err, || inst.describe()),
            Err(e) => t.error(&e, || inst.describe()),
        }
    }
    t.finish()
}

/// The oracle's objective is never beaten by random simplex points. The
/// reported error is the largest amount by which a random point came out
/// ahead (zero when none did).
pub fn oracle_optimality(instances: &[Instance], points: usize, seed: u64) -> PropertyResult {
    let mut t = Tally::new("oracle_optimality", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for inst in instances {
        let l = inst.vector();
        let best = match oracle_max_weights(&l, inst.r, 1e-9) {
            Ok(o) => o.objective,
            Err(e) => {
                t.error(&e, || inst.describe());
                continue;
            }
        };
        let mut excess: f64 = 0.0;
        for _ in 0..points {
            let w = random_simplex(&mut rng, l.len());
            let v = inner_objective(&l, &w, inst.r).unwrap_or(f64::NAN);
            excess = excess.max(v - best);
        }
        t.check(excess.max(0.0), || inst.describe());
    }
    t.finish()
}

/// Sum within 1e-12 and every entry strictly positive.
pub fn simplex(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("simplex", 1e-12);
    for inst in instances {
        match weights(&inst.vector(), inst.r) {
            Ok(w) => {
                let sum_err = (w.iter().sum::<f64>() - 1.0).abs();
                let err = if w.iter().all(|&x| x > 0.0) && w.len() == inst.losses.len() {
                    sum_err
                } else {
                    f64::INFINITY
                };
                t.check(err, || inst.describe());
            }
            Err(e) => t.error(&e, || inst.describe()),
        }
    }
    t.finish()
}

/// Strictly larger loss gives strictly larger weight. Error is the number of
/// violating pairs.
pub fn monotonicity(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("monotonicity", 0.5);
    for inst in instances {
        match weights(&inst.vector(), inst.r) {
            Ok(w) => {
                let l = &inst.losses;
                let mut bad = 0usize;
                for i in 0..l.len() {
                    for j in 0..l.len() {
                        if l[i] > l[j] && !(w[i] > w[j]) {
                            bad += 1;
                        }
                    }
                }
                t.check(bad as f64, || inst.describe());
            }
            Err(e) => t.error(&e, || inst.describe()),
        }
    }
    t.finish()
}

/// Losses on a 2^-20 grid shifted by an integer up to 1e6 in magnitude, so
/// every shifted loss is exact; weights must match bit for bit.
pub fn shift_invariance(instances: &[Instance], weights: WeightFn, seed: u64) -> PropertyResult {
    let mut t = Tally::new("shift_invariance", 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5417);
    let scale = (1u64 << 20) as f64;
    for inst in instances {
        let grid: Vec<f64> = inst.losses.iter().map(|l| (l * scale).round() / scale).collect();
        let c = rng.gen_range(-1_000_000i64..=1_000_000) as f64;
        let shifted: Vec<f64> = grid.iter().map(|l| l + c).collect();
        let witness = || format!("{} shift c={c}", inst.describe());
        let a = weights(&LossVector::new(grid.clone()).unwrap(), inst.r);
        let b = weights(&LossVector::new(shifted).unwrap(), inst.r);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let differing = a.iter().zip(&b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
                t.check(differing as f64, witness);
            }
            (Err(e), _) | (_, Err(e)) => t.error(&e, witness),
        }
    }
    t.finish()
}

/// `r = 1e6` with losses in [0, 10]: every weight within 1e-5 of `1/N`.
pub fn uniform_limit(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("uniform_limit", 1e-5);
    for inst in instances {
        let witness = || format!("{} at r=1e6", inst.describe());
        match weights(&inst.vector(), 1e6) {
            Ok(w) => {
                let u = 1.0 / w.len() as f64;
                t.check(w.iter().map(|x| (x - u).abs()).fold(0.0, f64::max), witness);
            }
            Err(e) => t.error(&e, witness),
        }
    }
    t.finish()
}

/// At `r = gap / 40` the largest-loss weight exceeds `1 - 1e-9`. Error is
/// `1 - w_max`.
pub fn concentration(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("concentration", 1e-9);
    for inst in instances {
        let l = &inst.losses;
        let mut order: Vec<usize> = (0..l.len()).collect();
        order.sort_by(|&a, &b| l[b].total_cmp(&l[a]));
        let gap = l[order[0]] - l[order[1]];
        if !(gap > 0.0) {
            continue;
        }
        let r = gap / 40.0;
        let witness = || format!("{} at r={r:e}", inst.describe());
        match weights(&inst.vector(), r) {
            Ok(w) => t.check(1.0 - w[order[0]], witness),
            Err(e) => t.error(&e, witness),
        }
    }
    t.finish()
}

/// Losses up to 1e4 at `r = 10`: finite weights and objectives, and the
/// identity still holds to 1e-9 relative to the loss scale.
pub fn overflow_safety(instances: &[Instance], weights: WeightFn) -> PropertyResult {
    let mut t = Tally::new("overflow_safety", 1e-9);
    for inst in instances {
        let big: Vec<f64> = inst.losses.iter().map(|l| l * 1e3).collect();
        let l = LossVector::new(big).unwrap();
        let witness = || format!("{} scaled by 1e3 at r=10", inst.describe());
        let value = weights(&l, 10.0).and_then(|w| {
            if w.iter().any(|x| !x.is_finite()) {
                return Ok(f64::INFINITY);
            }
            let inner = inner_objective(&l, &w, 10.0)?;
            let comp = compositional_objective(&l, 10.0)?;
            Ok(if inner.is_finite() && comp.is_finite() {
                (inner - comp).abs() / 1e4
            } else {
                f64::INFINITY
            })
        });
        match value {
            Ok(err) => t.check(err, witness),
            Err(e) => t.error(&e, witness),
        }
    }
    t.finish()
}

/// Small model used by the gradient and softmax checks.
pub const CHECK_MODEL: ModelConfig = ModelConfig {
    vocab_size: 256,
    context_window: 3,
    embed_dim: 4,
    hidden_dim: 8,
};

/// Seeded `(params, sample)` pair: params uniform in (-0.5, 0.5), sample of
/// 6 to 12 random bytes.
pub fn gradient_pair(config: ModelConfig, seed: u64) -> (ModelParams, Sample) {
    let params = ModelParams::init(config, seed, 0.5).expect("valid check model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    let len = rng.gen_range(6..=12);
    let tokens = (0..len).map(|_| rng.gen_range(0..config.vocab_size) as u16).collect();
    (params, Sample::new(tokens, false, 0))
}

/// Central differences with step `h` over every parameter.
pub fn finite_difference_gradient(params: &ModelParams, sample: &Sample, h: f64) -> Result<Vec<f64>> {
    let mut p = params.clone();
    let mut out = vec![0.0; p.len()];
    for (j, slot) in out.iter_mut().enumerate() {
        let orig = p.values()[j];
        p.values_mut()[j] = orig + h;
        let up = forward_loss(&p, sample)?;
        p.values_mut()[j] = orig - h;
        let down = forward_loss(&p, sample)?;
        p.values_mut()[j] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(out)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

pub fn gradient_check(pairs: usize, seed: u64) -> PropertyResult {
    let mut t = Tally::new("gradient_check", 1e-5);
    for k in 0..pairs {
        let pair_seed = seed.wrapping_add(k as u64);
        let (params, sample) = gradient_pair(CHECK_MODEL, pair_seed);
        let witness = || format!("pair seed {pair_seed}, tokens {:?}", sample.tokens);
        let result = forward_backward(&params, &sample)
            .and_then(|(_, g)| Ok(relative_error(&g, &finite_difference_gradient(&params, &sample, 1e-5)?)));
        match result {
            Ok(err) => t.check(err, witness),
            Err(e) => t.error(&e, witness),
        }
    }
    t.finish()
}

/// Next-token distributions sum to one within 1e-12.
pub fn softmax_head(pairs: usize, seed: u64) -> PropertyResult {
    let mut t = Tally::new("softmax_head", 1e-12);
    for k in 0..pairs {
        let (params, sample) = gradient_pair(CHECK_MODEL, seed.wrapping_add(1000 + k as u64));
        for end in 0..sample.tokens.len() {
            let context = &sample.tokens[..end];
            let witness = || format!("context {context:?}");
            match next_token_distribution(&params, context) {
                Ok(p) => {
                    let ok = p.iter().all(|&x| x >= 0.0);
                    let err = (p.iter().sum::<f64>() - 1.0).abs();
                    t.check(if ok { err } else { f64::INFINITY }, witness);
                }
                Err(e) => t.error(&e, witness),
            }
        }
    }
    t.finish()
}

/// Runs every property against `weights`.
pub fn verify_with(weights: WeightFn, options: VerifyOptions) -> VerifyReport {
    let inst = random_instances(options.instances, options.seed);
    VerifyReport {
        properties: vec![
            oracle_agreement(&inst, weights),
            objective_identity(&inst, weights),
            oracle_optimality(&inst, options.simplex_points, options.seed),
            simplex(&inst, weights),
            monotonicity(&inst, weights),
            shift_invariance(&inst, weights, options.seed),
            uniform_limit(&inst, weights),
            concentration(&inst, weights),
            overflow_safety(&inst, weights),
            softmax_head(options.gradient_pairs, options.seed),
            gradient_check(options.gradient_pairs, options.seed),
        ],
    }
}

pub fn verify_math(options: VerifyOptions) -> VerifyReport {
    verify_with(closed_form, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyOptions {
        VerifyOptions {
            instances: 60,
            simplex_points: 20,
            gradient_pairs: 2,
            seed: 11,
        }
    }

    #[test]
    fn suite_passes() {
        let report = verify_math(small());
        assert!(report.passed(), "{report}");
        assert!(report.get("objective_identity").unwrap().max_error < 1e-9);
    }

    fn unnormalized(losses: &LossVector, r: f64) -> Result<Vec<f64>> {
        let max = losses.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(losses.values().iter().map(|l| ((l - max) / r).exp()).collect())
    }

    #[test]
    fn unnormalized_weights_fail_simplex_with_witness() {
        let report = verify_with(unnormalized, small());
        let simplex = report.get("simplex").unwrap();
        assert!(!simplex.passed());
        assert!(simplex.witness.as_deref().unwrap().contains("losses=["));
        assert!(report.get("monotonicity").unwrap().passed());
        assert!(report.into_result().is_err());
    }

    #[test]
    fn instances_are_seeded() {
        let a = random_instances(5, 3);
        let b = random_instances(5, 3);
        assert_eq!(a.iter().map(|i| i.losses.clone()).collect::<Vec<_>>(),
                   b.iter().map(|i| i.losses.clone()).collect::<Vec<_>>());
        assert!(a.iter().all(|i| (2..=64).contains(&i.losses.len())));
        assert_eq!(a[1].r, 1.0);
    }
}
