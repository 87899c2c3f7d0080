//! Batch-wise sample selection by loss rank, and closed-form reweighting
//! exposed through the same interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reweight::{compute_weights, LossVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    HighRanking,
    MidRanking,
    LowRanking,
    #[serde(rename = "irdro")]
    IrDro,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uniform,
        Strategy::HighRanking,
        Strategy::MidRanking,
        Strategy::LowRanking,
        Strategy::IrDro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::HighRanking => "highranking",
            Strategy::MidRanking => "midranking",
            Strategy::LowRanking => "lowranking",
            Strategy::IrDro => "irdro",
        }
    }

    pub fn is_ranking(self) -> bool {
        matches!(
            self,
            Strategy::HighRanking | Strategy::MidRanking | Strategy::LowRanking
        )
    }

    /// The `(n1, n2)` fractions used for the ranking baselines with a batch
    /// of eight: skip nothing/keep a quarter, skip a quarter/keep a quarter,
    /// skip three quarters/keep a quarter. Uniform keeps everything.
    pub fn default_fractions(self) -> (f64, f64) {
        match self {
            Strategy::Uniform | Strategy::IrDro => (0.0, 1.0),
            Strategy::HighRanking => (0.0, 0.25),
            Strategy::MidRanking => (0.25, 0.25),
            Strategy::LowRanking => (0.75, 0.25),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "uniform" => Ok(Strategy::Uniform),
            "highranking" | "high" => Ok(Strategy::HighRanking),
            "midranking" | "mid" => Ok(Strategy::MidRanking),
            "lowranking" | "low" => Ok(Strategy::LowRanking),
            "irdro" => Ok(Strategy::IrDro),
            _ => Err(Error::InvalidParameter(format!("unknown selector strategy '{s}'"))),
        }
    }
}

/// How IR-DRO weights are produced from batch losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightEstimator {
    /// Softmax of the current batch losses.
    #[default]
    ClosedForm,
    /// `exp(L_i / r) / (N u)` with `u` a running average of the batch mean
    /// of `exp(L / r)`.
    RunningAverage { decay: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub n1: f64,
    #[serde(default = "one")]
    pub n2: f64,
    #[serde(default = "ten")]
    pub r: f64,
    #[serde(default)]
    pub estimator: WeightEstimator,
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

impl SelectorSpec {
    /// Spec with the strategy's default fractions and `r = 10`.
    pub fn new(strategy: Strategy) -> Self {
        let (n1, n2) = strategy.default_fractions();
        SelectorSpec {
            strategy,
            n1,
            n2,
            r: 10.0,
            estimator: WeightEstimator::ClosedForm,
        }
    }

    pub fn with_temperature(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.n1) {
            return Err(Error::InvalidParameter(format!("n1 = {} outside [0, 1]", self.n1)));
        }
        if !(self.n2 > 0.0 && self.n2 <= 1.0) {
            return Err(Error::InvalidParameter(format!("n2 = {} outside (0, 1]", self.n2)));
        }
        if self.n1 + self.n2 > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "n1 + n2 = {} exceeds 1",
                self.n1 + self.n2
            )));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidParameter(format!("r = {} must be positive", self.r)));
        }
        if let WeightEstimator::RunningAverage { decay } = self.estimator {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "running-average decay {decay} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// `(skip, keep)` sample counts for a batch of `batch_size`.
    pub fn counts(&self, batch_size: usize) -> Result<(usize, usize)> {
        let b = batch_size as f64;
        let skip = (self.n1 * b + 1e-9).floor() as usize;
        let keep = (self.n2 * b + 1e-9).floor() as usize;
        if keep == 0 {
            return Err(Error::InvalidParameter(format!(
                "n2 = {} selects no samples from a batch of {batch_size}",
                self.n2
            )));
        }
        if skip + keep > batch_size {
            return Err(Error::InvalidParameter(format!(
                "selection of {skip} + {keep} exceeds batch of {batch_size}"
            )));
        }
        Ok((skip, keep))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub index: usize,
    pub loss: f64,
    /// 1-based position in descending-loss order.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_indices: Vec<usize>,
    /// Weight of each entry of `selected_indices`, same order.
    pub weights: Vec<f64>,
    /// One entry per batch position, in batch order.
    pub rank_table: Vec<RankEntry>,
}

impl SelectionResult {
    /// Weight per batch position, zero for unselected samples.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.rank_table.len()];
        for (&i, &w) in self.selected_indices.iter().zip(&self.weights) {
            dense[i] = w;
        }
        dense
    }
}

/// Indices in descending-loss order, ties broken by ascending index.
pub fn rank_by_loss(losses: &LossVector) -> Vec<usize> {
    let values = losses.values();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn rank_table(losses: &LossVector, order: &[usize]) -> Vec<RankEntry> {
    let mut table: Vec<RankEntry> = losses
        .values()
        .iter()
        .enumerate()
        .map(|(index, &loss)| RankEntry { index, loss, rank: 0 })
        .collect();
    for (pos, &i) in order.iter().enumerate() {
        table[i].rank = pos + 1;
    }
    table
}

/// Applies `spec` to one batch with closed-form IR-DRO weights.
///
/// The running-average estimator needs state across batches and is handled
/// by the trainer; here it falls back to the closed form.
pub fn select(spec: &SelectorSpec, losses: &LossVector) -> Result<SelectionResult> {
    spec.validate()?;
    let n = losses.len();
    let order = rank_by_loss(losses);
    let rank_table = rank_table(losses, &order);
    let (selected_indices, weights) = match spec.strategy {
        Strategy::Uniform => ((0..n).collect(), vec![1.0 / n as f64; n]),
        Strategy::IrDro => ((0..n).collect(), compute_weights(losses, spec.r)?.into_inner()),
        Strategy::HighRanking | Strategy::MidRanking | Strategy::LowRanking => {
            let (skip, keep) = spec.counts(n)?;
            let chosen = order[skip..skip + keep].to_vec();
            (chosen, vec![1.0 / keep as f64; keep])
        }
    };
    Ok(SelectionResult {
        selected_indices,
        weights,
        rank_table,
    })
}
