//! Fixed-window feedforward byte-level language model with hand-written
//! gradients.
//!
//! Each next-token prediction embeds the previous `context_window` tokens
//! (left-padded with a reserved pad row), concatenates them, applies one
//! `tanh` hidden layer and projects to vocabulary logits:
//!
//! ```text
//! x = [E[c_1]; ...; E[c_m]]     h = tanh(W1 x + b1)     p = softmax(W2 h + b2)
//! ```
//!
//! Parameters live in one flat vector laid out as
//!
//! | block | shape                            |
//! |-------|----------------------------------|
//! | `E`   | `(vocab_size + 1) x embed_dim`   |
//! | `W1`  | `hidden_dim x (m * embed_dim)`   |
//! | `b1`  | `hidden_dim`                     |
//! | `W2`  | `vocab_size x hidden_dim`        |
//! | `b2`  | `vocab_size`                     |
//!
//! all row-major, in that order. The last embedding row belongs to the pad
//! token, whose id is `vocab_size`.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            context_window: 6,
            embed_dim: 16,
            hidden_dim: 64,
        }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.context_window == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
        {
            return Err(Error::InvalidParameter(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.vocab_size > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "vocab_size {} exceeds {}",
                self.vocab_size,
                u16::MAX
            )));
        }
        Ok(())
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size
    }

    pub fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    pub fn layout(&self) -> Layout {
        let embed = 0;
        let w1 = embed + (self.vocab_size + 1) * self.embed_dim;
        let b1 = w1 + self.hidden_dim * self.input_dim();
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.vocab_size * self.hidden_dim;
        let len = b2 + self.vocab_size;
        Layout {
            embed,
            w1,
            b1,
            w2,
            b2,
            len,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// One training sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u16>,
    pub is_noise: bool,
    /// Byte offset of the window in the source corpus.
    pub source_offset: u64,
}

impl Sample {
    pub fn new(tokens: Vec<u16>, is_noise: bool, source_offset: u64) -> Self {
        Sample {
            tokens,
            is_noise,
            source_offset,
        }
    }

    /// Number of predicted positions.
    pub fn predictions(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sample needs at least 2 tokens, has {}",
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range for vocabulary of {}",
                config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector plus the configuration that shapes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    values: Vec<f64>,
}

/// Same shape as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl Deref for Gradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Gradient {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub const DEFAULT_INIT_SCALE: f64 = 0.05;

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            values: vec![0.0; config.param_count()],
            config,
        })
    }

    /// Every parameter drawn from `uniform(-scale, scale)`.
    pub fn init(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..config.param_count())
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Ok(ModelParams { config, values })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(ModelParams { config, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Gradient {
        Gradient::zeros(self.values.len())
    }
}

/// Scratch buffers for one sequence.
struct Scratch {
    input: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    d_hidden: Vec<f64>,
    d_input: Vec<f64>,
    context: Vec<usize>,
}

impl Scratch {
    fn new(config: &ModelConfig) -> Self {
        Scratch {
            input: vec![0.0; config.input_dim()],
            hidden: vec![0.0; config.hidden_dim],
            probs: vec![0.0; config.vocab_size],
            d_hidden: vec![0.0; config.hidden_dim],
            d_input: vec![0.0; config.input_dim()],
            context: vec![0; config.context_window],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fills `scratch.context` with the `m` token ids preceding `pos`.
fn load_context(config: &ModelConfig, tokens: &[u16], pos: usize, context: &mut [usize]) {
    let m = config.context_window;
    for (j, slot) in context.iter_mut().enumerate() {
        // slot j holds token pos - m + j
        *slot = match (pos + j).checked_sub(m) {
            Some(k) => tokens[k] as usize,
            None => config.pad_id(),
        };
    }
}

/// Computes `scratch.probs` for the given context and returns nothing; the
/// hidden activations are left in `scratch.hidden`.
fn forward_position(params: &[f64], config: &ModelConfig, layout: &Layout, s: &mut Scratch) {
    let e = config.embed_dim;
    let d = config.input_dim();
    for (j, &tok) in s.context.iter().enumerate() {
        let row = layout.embed + tok * e;
        s.input[j * e..(j + 1) * e].copy_from_slice(&params[row..row + e]);
    }
    for (k, h) in s.hidden.iter_mut().enumerate() {
        let w = &params[layout.w1 + k * d..layout.w1 + (k + 1) * d];
        *h = (dot(w, &s.input) + params[layout.b1 + k]).tanh();
    }
    let hd = config.hidden_dim;
    let mut max = f64::NEG_INFINITY;
    for (v, z) in s.probs.iter_mut().enumerate() {
        let w = &params[layout.w2 + v * hd..layout.w2 + (v + 1) * hd];
        *z = dot(w, &s.hidden) + params[layout.b2 + v];
        max = max.max(*z);
    }
    let mut total = 0.0;
    for z in s.probs.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for p in s.probs.iter_mut() {
        *p /= total;
    }
}

fn negative_log_prob(probs: &[f64], target: usize) -> f64 {
    -probs[target].ln()
}

fn run(params: &ModelParams, sample: &Sample, mut grad: Option<&mut [f64]>) -> Result<f64> {
    let config = params.config;
    sample.validate(&config)?;
    let layout = config.layout();
    let theta = params.values.as_slice();
    let mut s = Scratch::new(&config);
    let n_pred = sample.predictions();
    let scale = 1.0 / n_pred as f64;
    let (e, d, hd) = (config.embed_dim, config.input_dim(), config.hidden_dim);
    let mut total = 0.0;

    for pos in 1..sample.tokens.len() {
        let target = sample.tokens[pos] as usize;
        load_context(&config, &sample.tokens, pos, &mut s.context);
        forward_position(theta, &config, &layout, &mut s);
        total += negative_log_prob(&s.probs, target);

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // d loss / d logits = (p - onehot) / n_pred
        s.d_hidden.iter_mut().for_each(|x| *x = 0.0);
        for v in 0..config.vocab_size {
            let dz = (s.probs[v] - if v == target { 1.0 } else { 0.0 }) * scale;
            g[layout.b2 + v] += dz;
            let w_off = layout.w2 + v * hd;
            axpy(dz, &s.hidden, &mut g[w_off..w_off + hd]);
            axpy(dz, &theta[w_off..w_off + hd], &mut s.d_hidden);
        }
        s.d_input.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..hd {
            let h = s.hidden[k];
            let da = s.d_hidden[k] * (1.0 - h * h);
            if da == 0.0 {
                continue;
            }
            g[layout.b1 + k] += da;
            let w_off = layout.w1 + k * d;
            axpy(da, &s.input, &mut g[w_off..w_off + d]);
            axpy(da, &theta[w_off..w_off + d], &mut s.d_input);
        }
        for (j, &tok) in s.context.iter().enumerate() {
            let row = layout.embed + tok * e;
            axpy(1.0, &s.d_input[j * e..(j + 1) * e], &mut g[row..row + e]);
        }
    }
    Ok(total * scale)
}

/// Mean negative log-likelihood per predicted token.
pub fn forward_loss(params: &ModelParams, sample: &Sample) -> Result<f64> {
    run(params, sample, None)
}

/// Loss together with its exact gradient.
pub fn forward_backward(params: &ModelParams, sample: &Sample) -> Result<(f64, Gradient)> {
    let mut grad = params.zeros_like();
    let loss = run(params, sample, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Next-token distribution after `context` (the most recent tokens, oldest
/// first; only the last `context_window` are used).
pub fn next_token_distribution(params: &ModelParams, context: &[u16]) -> Result<Vec<f64>> {
    let config = params.config;
    if let Some(&t) = context.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::InvalidInput(format!("token {t} out of range")));
    }
    let layout = config.layout();
    let mut s = Scratch::new(&config);
    load_context(&config, context, context.len(), &mut s.context);
    forward_position(&params.values, &config, &layout, &mut s);
    Ok(s.probs)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            context_window: 3,
            embed_dim: 4,
            hidden_dim: 5,
        }
    }

    fn sample(bytes: &[u8]) -> Sample {
        Sample::new(bytes.iter().map(|&b| b as u16).collect(), false, 0)
    }

    #[test]
    fn layout_matches_documented_length() {
        let c = ModelConfig::default();
        let expected = c.embed_dim * (c.vocab_size + 1)
            + c.hidden_dim * (c.context_window * c.embed_dim + 1)
            + c.vocab_size * (c.hidden_dim + 1);
        assert_eq!(c.param_count(), expected);
        assert_eq!(c.layout().len, expected);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let p = ModelParams::zeros(tiny()).unwrap();
        for s in [sample(b"hello world"), sample(b"ab")] {
            assert_abs_diff_eq!(forward_loss(&p, &s).unwrap(), 256f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn length_two_sample_is_single_term() {
        let p = ModelParams::init(tiny(), 3, 0.5).unwrap();
        let s = sample(b"qz");
        let probs = next_token_distribution(&p, &[b'q' as u16]).unwrap();
        assert_abs_diff_eq!(
            forward_loss(&p, &s).unwrap(),
            -probs[b'z' as usize].ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn output_bias_gradient_at_zero() {
        let p = ModelParams::zeros(tiny()).unwrap();
        let s = sample(b"abca");
        let (_, g) = forward_backward(&p, &s).unwrap();
        let b2 = tiny().layout().b2;
        let n = 3.0;
        for v in 0..256 {
            let hits = s.tokens[1..].iter().filter(|&&t| t as usize == v).count() as f64;
            assert_abs_diff_eq!(g[b2 + v], 1.0 / 256.0 - hits / n, epsilon = 1e-15);
        }
    }

    #[test]
    fn unused_embedding_rows_have_zero_gradient() {
        let p = ModelParams::init(tiny(), 11, 0.3).unwrap();
        let s = sample(b"the cat");
        let (_, g) = forward_backward(&p, &s).unwrap();
        let e = tiny().embed_dim;
        // The final token is never used as context.
        let context_tokens: Vec<usize> = s.tokens[..s.tokens.len() - 1]
            .iter()
            .map(|&t| t as usize)
            .collect();
        for row in 0..256 {
            let block = &g[row * e..(row + 1) * e];
            if context_tokens.contains(&row) {
                assert!(block.iter().any(|&x| x != 0.0));
            } else {
                assert!(block.iter().all(|&x| x == 0.0), "row {row}");
            }
        }
    }

    #[test]
    fn loss_and_gradient_paths_agree() {
        let p = ModelParams::init(ModelConfig::default(), 5, 0.2).unwrap();
        let s = sample(b"quis nostrum exercitationem");
        let (l, _) = forward_backward(&p, &s).unwrap();
        assert_eq!(l.to_bits(), forward_loss(&p, &s).unwrap().to_bits());
    }

    #[test]
    fn distribution_sums_to_one() {
        let p = ModelParams::init(ModelConfig::default(), 9, 1.0).unwrap();
        for ctx in [&b""[..], b"a", b"abcdefghij"] {
            let ctx: Vec<u16> = ctx.iter().map(|&b| b as u16).collect();
            let probs = next_token_distribution(&p, &ctx).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_samples() {
        let c = ModelConfig {
            vocab_size: 10,
            ..tiny()
        };
        let p = ModelParams::zeros(c).unwrap();
        assert!(matches!(
            forward_loss(&p, &Sample::new(vec![1, 12], false, 0)),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            forward_loss(&p, &Sample::new(vec![1], false, 0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(tiny(), 1, 0.05).unwrap();
        let b = ModelParams::init(tiny(), 1, 0.05).unwrap();
        let c = ModelParams::init(tiny(), 2, 0.05).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values().iter().all(|v| v.abs() < 0.05));
    }
}
