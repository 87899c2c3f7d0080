//! Training-loop contracts.

use irdro::checkpoint::Checkpoint;
use irdro::data::{synthetic_text, Corpus, CorpusParams};
use irdro::model::{forward_backward, forward_loss, ModelConfig, ModelParams, Sample};
use irdro::optim::{adamw_step, OptimizerConfig, OptimizerState};
use irdro::report::perplexity;
use irdro::reweight::{compositional_objective, compute_weights, LossVector};
use irdro::select::{SelectorSpec, Strategy};
use irdro::train::{per_sample_gradients, run_continual, GradCombine, TrainConfig, Trainer};

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        context_window: 4,
        embed_dim: 8,
        hidden_dim: 16,
    }
}

fn corpus() -> Corpus {
    Corpus::from_bytes(
        synthetic_text(16 * 1024, 1),
        CorpusParams {
            sample_length: 32,
            noise_fraction: 0.2,
            seed: 4,
        },
    )
    .unwrap()
}

fn first_batch(corpus: &Corpus, b: usize) -> (Vec<usize>, Vec<&Sample>) {
    let ids = corpus.train_batches(b, 9).unwrap().next().unwrap();
    let batch = ids.iter().map(|&i| corpus.sample(i)).collect();
    (ids, batch)
}

fn config(strategy: Strategy, combine: GradCombine) -> TrainConfig {
    TrainConfig {
        grad_combine: combine,
        ..TrainConfig::continual(strategy)
    }
}

#[test]
fn uniform_convex_step_is_erm_step() {
    let corpus = corpus();
    let params = ModelParams::init(small_model(), 5, 0.1).unwrap();
    let (ids, batch) = first_batch(&corpus, 8);

    // Reference: mean of per-sample gradients, then AdamW.
    let mut mean = vec![0.0; params.len()];
    for s in &batch {
        let (_, g) = forward_backward(&params, s).unwrap();
        for (m, x) in mean.iter_mut().zip(g.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= 8.0);
    let mut reference = params.values().to_vec();
    let mut state = OptimizerState::new(OptimizerConfig::adamw(1e-4), params.len()).unwrap();
    adamw_step(&mut state, &mut reference, &mean).unwrap();

    let mut t = Trainer::new(params, config(Strategy::Uniform, GradCombine::ConvexCombination)).unwrap();
    t.train_step(&ids, &batch).unwrap();
    assert_eq!(t.params.values(), &reference[..]);
}

#[test]
fn huge_temperature_matches_uniform() {
    let corpus = corpus();
    let params = ModelParams::init(small_model(), 6, 0.1).unwrap();
    let (ids, batch) = first_batch(&corpus, 8);
    for combine in [GradCombine::Algorithm1Scaled, GradCombine::ConvexCombination] {
        let mut uniform = Trainer::new(params.clone(), config(Strategy::Uniform, combine)).unwrap();
        let mut cfg = config(Strategy::IrDro, combine);
        cfg.selector = SelectorSpec::new(Strategy::IrDro).with_temperature(1e9);
        let mut irdro = Trainer::new(params.clone(), cfg).unwrap();
        uniform.train_step(&ids, &batch).unwrap();
        irdro.train_step(&ids, &batch).unwrap();
        let dist = uniform
            .params
            .values()
            .iter()
            .zip(irdro.params.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-8, "{combine:?}: {dist:e}");
    }
}

#[test]
fn weights_are_detached_from_gradients() {
    let corpus = corpus();
    let params = ModelParams::init(small_model(), 7, 0.3).unwrap();
    let (ids, batch) = first_batch(&corpus, 8);
    let grads: Vec<_> = per_sample_gradients(&params, &batch)
        .unwrap()
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let losses = LossVector::new(batch.iter().map(|s| forward_loss(&params, s).unwrap()).collect()).unwrap();

    for r in [0.5, 10.0] {
        let mut cfg = config(Strategy::IrDro, GradCombine::Algorithm1Scaled);
        cfg.selector.r = r;
        cfg.optimizer = OptimizerConfig::sgd(1.0);
        let mut t = Trainer::new(params.clone(), cfg).unwrap();
        let rec = t.train_step(&ids, &batch).unwrap();
        let w = compute_weights(&losses, r).unwrap();
        assert_eq!(rec.weights().collect::<Vec<_>>(), w.weights());
        // theta' = theta - (1/|B|) sum w_i g_i with the per-sample g_i above.
        for (j, (after, before)) in t.params.values().iter().zip(params.values()).enumerate() {
            let combined: f64 = grads.iter().zip(w.weights()).map(|(g, wi)| wi * g[j]).sum::<f64>() / 8.0;
            assert!((before - after - combined).abs() < 1e-15);
        }
        let objective = compositional_objective(&losses, r).unwrap();
        assert!((rec.objective - objective).abs() < 1e-9);
    }
}

#[test]
fn ranking_drops_unselected_gradients() {
    let corpus = corpus();
    let params = ModelParams::init(small_model(), 8, 0.3).unwrap();
    let (ids, batch) = first_batch(&corpus, 8);
    let mut cfg = config(Strategy::MidRanking, GradCombine::ConvexCombination);
    cfg.optimizer = OptimizerConfig::sgd(1.0);
    let mut t = Trainer::new(params.clone(), cfg).unwrap();
    let rec = t.train_step(&ids, &batch).unwrap();

    let kept: Vec<usize> = (0..8).filter(|&i| rec.samples[i].weight > 0.0).collect();
    assert_eq!(kept.len(), 2);
    let mut expected = params.values().to_vec();
    for &i in &kept {
        let (_, g) = forward_backward(&params, batch[i]).unwrap();
        for (e, x) in expected.iter_mut().zip(g.iter()) {
            *e -= 0.5 * x;
        }
    }
    for (a, b) in t.params.values().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn runs_are_reproducible_and_zero_steps_is_identity() {
    let corpus = corpus();
    let initial = Checkpoint::new(ModelParams::init(small_model(), 9, 0.1).unwrap());
    let mut cfg = config(Strategy::IrDro, GradCombine::Algorithm1Scaled);
    cfg.steps = 12;
    cfg.seed = 3;
    let (a, log_a) = run_continual(&initial, &corpus, &cfg, |_| Ok(())).unwrap();
    let (b, log_b) = run_continual(&initial, &corpus, &cfg, |_| Ok(())).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a.len(), 12);
    for rec in &log_a {
        assert!((rec.weights().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    cfg.seed = 4;
    let (_, log_c) = run_continual(&initial, &corpus, &cfg, |_| Ok(())).unwrap();
    assert_ne!(log_a, log_c);

    cfg.steps = 0;
    let (same, log) = run_continual(&initial, &corpus, &cfg, |_| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(same.to_bytes(), initial.to_bytes());
}

#[test]
fn overfits_a_single_sequence() {
    let text = b"Lorem ipsum dolor sit amet, consectetur adipiscing elit, sed do.";
    let sample = Sample::new(text.iter().map(|&b| b as u16).collect(), false, 0);
    let config = ModelConfig::default();
    let params = ModelParams::init(config, 0, 0.05).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        steps: 500,
        seed: 0,
        selector: SelectorSpec::new(Strategy::Uniform),
        optimizer: OptimizerConfig::adamw(3e-3),
        grad_combine: GradCombine::ConvexCombination,
        loss_scale: Default::default(),
    };
    let mut t = Trainer::new(params, cfg).unwrap();
    for _ in 0..500 {
        t.train_step(&[0], &[&sample]).unwrap();
    }
    let loss = forward_loss(&t.params, &sample).unwrap();
    assert!(loss < 0.1, "loss {loss}");
    let ppl = perplexity(&t.params, &[&sample]).unwrap();
    assert!(ppl < 1.2 && ppl >= 1.0, "perplexity {ppl}");
}
