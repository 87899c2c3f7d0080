//! Analytic gradients against central finite differences.

use irdro::model::{forward_backward, forward_loss, ModelConfig, ModelParams, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        context_window: 3,
        embed_dim: 4,
        hidden_dim: 8,
    }
}

fn pair(seed: u64) -> (ModelParams, Sample) {
    let params = ModelParams::init(config(), seed, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let len = rng.gen_range(2..=10);
    let tokens = (0..len).map(|_| rng.gen_range(0..256u16)).collect();
    (params, Sample::new(tokens, false, 0))
}

fn numeric_gradient(params: &ModelParams, sample: &Sample) -> Vec<f64> {
    (0..params.len())
        .map(|j| {
            let mut up = params.clone();
            up.values_mut()[j] += H;
            let mut down = params.clone();
            down.values_mut()[j] -= H;
            (forward_loss(&up, sample).unwrap() - forward_loss(&down, sample).unwrap()) / (2.0 * H)
        })
        .collect()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn analytic_matches_central_differences() {
    for seed in 0..20 {
        let (params, sample) = pair(seed);
        let (loss, grad) = forward_backward(&params, &sample).unwrap();
        assert_eq!(loss, forward_loss(&params, &sample).unwrap());
        let fd = numeric_gradient(&params, &sample);
        let err = norm(grad.iter().zip(&fd).map(|(a, b)| a - b)) / norm(fd.iter().copied());
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn pad_row_receives_gradient_from_short_contexts() {
    let (params, sample) = pair(3);
    let (_, grad) = forward_backward(&params, &sample).unwrap();
    let layout = params.config().layout();
    let e = params.config().embed_dim;
    let pad = params.config().pad_id();
    let pad_row = &grad[layout.embed + pad * e..layout.embed + (pad + 1) * e];
    // The first predictions see a left-padded context.
    assert!(pad_row.iter().any(|&g| g != 0.0));
}
