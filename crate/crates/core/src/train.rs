//! The practical IR-DRO training loop and the plain-ERM pretraining that
//! produces the starting checkpoint.
//!
//! One step draws a batch, computes every per-sample loss and gradient,
//! turns the *detached* losses into weights (or a ranked selection), combines
//! the gradients and hands the result to the optimizer. Weights never carry
//! gradient back into the model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward_backward, forward_loss, Gradient, ModelParams, Sample};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::reweight::{
    compositional_objective, compute_weights, update_running_average, LossVector,
    RunningAverageState,
};
use crate::select::{select, SelectorSpec, Strategy, WeightEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCombine {
    /// `(1/|B|) sum_i w_i g_i`, literally as in the practical algorithm.
    #[default]
    Algorithm1Scaled,
    /// `sum_i w_i g_i`; with uniform weights this is the ERM mean gradient.
    ConvexCombination,
}

/// Which per-sample loss is fed to ranking, weighting and the logged
/// objective. Gradients always come from the per-token mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    #[default]
    TokenMean,
    TokenSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub selector: SelectorSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub grad_combine: GradCombine,
    #[serde(default)]
    pub loss_scale: LossScale,
}

impl TrainConfig {
    /// Continual-training defaults: 100 batches of 8, IR-DRO with `r = 10`,
    /// AdamW with weight decay 0.01 at a desk-scale learning rate of 1e-4.
    pub fn continual(strategy: Strategy) -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 100,
            seed: 0,
            selector: SelectorSpec::new(strategy),
            optimizer: OptimizerConfig::adamw(1e-4),
            grad_combine: GradCombine::Algorithm1Scaled,
            loss_scale: LossScale::TokenMean,
        }
    }

    /// Plain ERM: uniform weights, mean gradient.
    pub fn pretrain() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            seed: 0,
            selector: SelectorSpec::new(Strategy::Uniform),
            optimizer: OptimizerConfig::adamw(1e-3),
            grad_combine: GradCombine::ConvexCombination,
            loss_scale: LossScale::TokenMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        self.selector.validate()?;
        self.optimizer.validate()?;
        if self.selector.strategy.is_ranking() {
            self.selector.counts(self.batch_size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Window index in the corpus.
    pub id: usize,
    pub loss: f64,
    /// Zero for samples a ranking strategy skipped.
    pub weight: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub samples: Vec<SampleRecord>,
    pub grad_norm: f64,
    /// Tilted batch objective `r log((1/N) sum exp(L_i / r))` of the batch
    /// losses at the selector's temperature.
    pub objective: f64,
    pub mean_loss: f64,
}

impl StepRecord {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.weight)
    }
}

fn check_same_shape(grads: &[Gradient]) -> Result<usize> {
    let len = grads
        .first()
        .map(|g| g.len())
        .ok_or_else(|| Error::InvalidInput("no gradients to combine".into()))?;
    if grads.iter().any(|g| g.len() != len) {
        return Err(Error::InvalidInput("gradients differ in length".into()));
    }
    Ok(len)
}

/// Weighted gradient sum, scaled by `1/batch_size` in
/// [`GradCombine::Algorithm1Scaled`] mode.
pub fn combine_gradients(
    grads: &[Gradient],
    weights: &[f64],
    batch_size: usize,
    mode: GradCombine,
) -> Result<Gradient> {
    let len = check_same_shape(grads)?;
    if weights.len() != grads.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be positive".into()));
    }
    let mut out = Gradient::zeros(len);
    for (g, &w) in grads.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(g.iter()) {
            *o += w * x;
        }
    }
    if mode == GradCombine::Algorithm1Scaled {
        let scale = 1.0 / batch_size as f64;
        out.iter_mut().for_each(|o| *o *= scale);
    }
    Ok(out)
}

/// Per-sample losses and gradients, computed concurrently. Order follows
/// `batch`.
pub fn per_sample_gradients(
    params: &ModelParams,
    batch: &[&Sample],
) -> Result<Vec<(f64, Gradient)>> {
    batch
        .par_iter()
        .map(|s| forward_backward(params, s))
        .collect()
}

pub fn per_sample_losses(params: &ModelParams, batch: &[&Sample]) -> Result<Vec<f64>> {
    batch.par_iter().map(|s| forward_loss(params, s)).collect()
}

/// Owns the parameters and optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    running_average: Option<RunningAverageState>,
    steps_done: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(config.optimizer, params.len())?;
        Ok(Trainer {
            params,
            optimizer,
            config,
            running_average: None,
            steps_done: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn scaled(&self, loss: f64, sample: &Sample) -> f64 {
        match self.config.loss_scale {
            LossScale::TokenMean => loss,
            LossScale::TokenSum => loss * sample.predictions() as f64,
        }
    }

    fn irdro_weights(&mut self, losses: &LossVector) -> Result<Vec<f64>> {
        let r = self.config.selector.r;
        match self.config.selector.estimator {
            WeightEstimator::ClosedForm => Ok(compute_weights(losses, r)?.into_inner()),
            WeightEstimator::RunningAverage { decay } => {
                let exps: Vec<f64> = losses.values().iter().map(|l| (l / r).exp()).collect();
                let n = exps.len() as f64;
                let batch_mean = exps.iter().sum::<f64>() / n;
                if !batch_mean.is_finite() {
                    return Err(Error::Numeric(format!(
                        "exp(L / r) overflows at r = {r}; use the closed-form estimator"
                    )));
                }
                let state = match self.running_average {
                    Some(s) => update_running_average(s, batch_mean),
                    None => RunningAverageState::new(batch_mean, decay)?,
                };
                self.running_average = Some(state);
                Ok(exps.iter().map(|e| e / (n * state.estimate)).collect())
            }
        }
    }

    /// One update on `batch` (window ids `ids`, same order).
    pub fn train_step(&mut self, ids: &[usize], batch: &[&Sample]) -> Result<StepRecord> {
        let b = self.config.batch_size;
        if batch.len() != b || ids.len() != b {
            return Err(Error::InvalidInput(format!(
                "batch of {} samples, configured for {b}",
                batch.len()
            )));
        }
        let spec = self.config.selector;

        // Ranking strategies only backpropagate what they keep.
        let (raw_losses, kept, weights, grads) = if spec.strategy.is_ranking() {
            let raw = per_sample_losses(&self.params, batch)?;
            let scaled: Vec<f64> = raw.iter().zip(batch).map(|(l, s)| self.scaled(*l, s)).collect();
            let selection = select(&spec, &LossVector::new(scaled)?)?;
            let chosen: Vec<&Sample> = selection.selected_indices.iter().map(|&i| batch[i]).collect();
            let grads = per_sample_gradients(&self.params, &chosen)?
                .into_iter()
                .map(|(_, g)| g)
                .collect();
            (raw, selection.selected_indices, selection.weights, grads)
        } else {
            let (raw, grads): (Vec<f64>, Vec<Gradient>) =
                per_sample_gradients(&self.params, batch)?.into_iter().unzip();
            let scaled: Vec<f64> = raw.iter().zip(batch).map(|(l, s)| self.scaled(*l, s)).collect();
            let scaled = LossVector::new(scaled)?;
            let weights = match spec.strategy {
                Strategy::IrDro => self.irdro_weights(&scaled)?,
                _ => vec![1.0 / b as f64; b],
            };
            (raw, (0..b).collect(), weights, grads)
        };

        let scaled = LossVector::new(
            raw_losses
                .iter()
                .zip(batch)
                .map(|(l, s)| self.scaled(*l, s))
                .collect(),
        )?;
        let order = crate::select::rank_by_loss(&scaled);
        let mut ranks = vec![0; b];
        for (pos, &i) in order.iter().enumerate() {
            ranks[i] = pos + 1;
        }
        let mut dense = vec![0.0; b];
        for (&i, &w) in kept.iter().zip(&weights) {
            dense[i] = w;
        }

        let combined = combine_gradients(&grads, &weights, b, self.config.grad_combine)?;
        self.optimizer.step(self.params.values_mut(), &combined)?;
        if self.params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameters after step {}",
                self.steps_done
            )));
        }

        let record = StepRecord {
            step: self.steps_done,
            samples: (0..b)
                .map(|i| SampleRecord {
                    id: ids[i],
                    loss: raw_losses[i],
                    weight: dense[i],
                    rank: ranks[i],
                })
                .collect(),
            grad_norm: combined.norm(),
            objective: compositional_objective(&scaled, spec.r)?,
            mean_loss: raw_losses.iter().sum::<f64>() / b as f64,
        };
        self.steps_done += 1;
        Ok(record)
    }
}

/// Runs `config.steps` updates on batches drawn from the training split.
/// `on_step` sees every record as it is produced.
pub fn run_training(
    trainer: &mut Trainer,
    corpus: &Corpus,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let config = trainer.config;
    let mut records = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(records);
    }
    let batches = corpus.train_batches(config.batch_size, config.seed)?;
    for ids in batches.take(config.steps) {
        let batch: Vec<&Sample> = ids.iter().map(|&i| corpus.sample(i)).collect();
        let record = trainer.train_step(&ids, &batch)?;
        on_step(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Continual training from `initial`. With zero steps the returned
/// checkpoint is `initial` unchanged; otherwise it carries the final
/// parameters and the continual run's optimizer state.
pub fn run_continual(
    initial: &Checkpoint,
    corpus: &Corpus,
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    config.validate()?;
    if config.steps == 0 {
        return Ok((initial.clone(), Vec::new()));
    }
    let mut trainer = Trainer::new(initial.params.clone(), *config)?;
    let records = run_training(&mut trainer, corpus, on_step)?;
    Ok((
        Checkpoint {
            params: trainer.params,
            optimizer: Some(trainer.optimizer),
        },
        records,
    ))
}

/// ERM pretraining from a seeded random initialization.
pub fn pretrain(
    initial: ModelParams,
    corpus: &Corpus,
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(initial, *config)?;
    let records = run_training(&mut trainer, corpus, on_step)?;
    Ok((
        Checkpoint {
            params: trainer.params,
            optimizer: Some(trainer.optimizer),
        },
        records,
    ))
}
