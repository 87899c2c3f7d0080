//! Parameter update rules: plain gradient descent and AdamW with decoupled
//! weight decay and bias correction. The learning rate is constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            weight_decay: 0.0,
            ..OptimizerConfig::adamw(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(
                "epsilon and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus, for AdamW, the moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let moments = match config.kind {
            OptimizerKind::AdamW => param_count,
            OptimizerKind::Sgd => 0,
        };
        Ok(OptimizerState {
            config,
            step_count: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        })
    }

    /// Applies one update in place, dispatching on the configured kind.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grad, self.config.learning_rate)?;
                self.step_count += 1;
                Ok(())
            }
            OptimizerKind::AdamW => adamw_step(self, params, grad),
        }
    }
}

fn check_shapes(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::InvalidInput(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    Ok(())
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_shapes(params, grad)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// One AdamW update: decay `theta <- theta - lr * wd * theta`, then the
/// bias-corrected adaptive step `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if state.config.kind != OptimizerKind::AdamW {
        return Err(Error::InvalidInput("adamw_step called on a non-AdamW state".into()));
    }
    check_shapes(params, grad)?;
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "optimizer moments sized {} for {} parameters",
            state.first_moment.len(),
            params.len()
        )));
    }
    let OptimizerConfig {
        learning_rate: lr,
        beta1,
        beta2,
        epsilon,
        weight_decay,
        ..
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *p *= decay;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, 2.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.3).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        sgd_step(&mut p, &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(p, vec![0.5, 1.5]);

        let g = [0.25, -0.75, 2.0];
        let mut twice = vec![0.1, 0.2, 0.3];
        let mut once = twice.clone();
        sgd_step(&mut twice, &g, 0.125).unwrap();
        sgd_step(&mut twice, &g, 0.125).unwrap();
        sgd_step(&mut once, &g, 0.25).unwrap();
        assert_eq!(twice, once);

        assert!(matches!(
            sgd_step(&mut p, &[1.0], 0.1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = OptimizerConfig {
            weight_decay: 0.01,
            ..OptimizerConfig::adamw(0.1)
        };
        let mut state = OptimizerState::new(cfg, 3).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        adamw_step(&mut state, &mut p, &[0.0; 3]).unwrap();
        for (after, before) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert_abs_diff_eq!(*after, before * (1.0 - 0.001), epsilon = 1e-15);
        }
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adamw_first_step_is_sign_like() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::adamw(0.01)
        };
        let mut state = OptimizerState::new(cfg, 3).unwrap();
        let mut p = vec![0.0; 3];
        let g = [0.3, -4.0, 1e-3];
        adamw_step(&mut state, &mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            // m_hat = g, v_hat = g^2 at t = 1
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert_abs_diff_eq!(*pi, expected, epsilon = 1e-15);
            assert_abs_diff_eq!(pi.abs(), 0.01, epsilon = 1e-7);
        }
    }

    #[test]
    fn adamw_zero_betas_bounded_by_lr() {
        let cfg = OptimizerConfig {
            beta1: 0.0,
            beta2: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::adamw(0.05)
        };
        let mut state = OptimizerState::new(cfg, 4).unwrap();
        let mut p = vec![0.0; 4];
        for g in [[1.0, -2.0, 1e-9, 0.0], [-5.0, 3.0, 2.0, 1e3]] {
            let before = p.clone();
            adamw_step(&mut state, &mut p, &g).unwrap();
            for (a, b) in p.iter().zip(&before) {
                assert!((a - b).abs() <= 0.05 + 1e-12);
            }
        }
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adamw_is_deterministic() {
        let cfg = OptimizerConfig::adamw(1e-3);
        let g = [0.5, -0.1, 2.0, 0.0];
        let run = || {
            let mut s = OptimizerState::new(cfg, 4).unwrap();
            let mut p = vec![0.3, -0.2, 0.1, 1.0];
            for _ in 0..5 {
                adamw_step(&mut s, &mut p, &g).unwrap();
            }
            (s, p)
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        assert!(s1.first_moment.iter().chain(&s1.second_moment).all(|x| x.is_finite()));
    }

    #[test]
    fn adamw_rejects_mismatch_and_wrong_kind() {
        let mut s = OptimizerState::new(OptimizerConfig::adamw(0.1), 2).unwrap();
        let mut p = vec![0.0; 3];
        assert!(adamw_step(&mut s, &mut p, &[0.0; 3]).is_err());
        let mut sgd = OptimizerState::new(OptimizerConfig::sgd(0.1), 3).unwrap();
        assert!(adamw_step(&mut sgd, &mut p, &[0.0; 3]).is_err());
        sgd.step(&mut p, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p, vec![-0.1; 3]);
        assert_eq!(sgd.step_count, 1);
    }
}
