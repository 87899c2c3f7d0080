//! Experiment configuration.
//!
//! A config file is a TOML tree in which every key is optional; whatever it
//! sets is laid over [`Settings::default`], and command-line flags are laid
//! over that. The fully resolved [`Settings`] is what runs record, and it
//! parses back through the same loader unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CorpusParams;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, DEFAULT_INIT_SCALE};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::select::{SelectorSpec, Strategy, WeightEstimator};
use crate::train::{GradCombine, LossScale, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub path: PathBuf,
    pub sample_length: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let p = CorpusParams::default();
        CorpusSettings {
            path: PathBuf::from("corpus.txt"),
            sample_length: p.sample_length,
            noise_fraction: p.noise_fraction,
            seed: p.seed,
        }
    }
}

impl CorpusSettings {
    pub fn params(&self) -> CorpusParams {
        CorpusParams {
            sample_length: self.sample_length,
            noise_fraction: self.noise_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSettings {
            vocab_size: m.vocab_size,
            context_window: m.context_window,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

impl ModelSettings {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            context_window: self.context_window,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub histogram_bins: usize,
    pub top_k: usize,
    pub mid_k: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            histogram_bins: 20,
            top_k: 32,
            mid_k: 8,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub model: ModelSettings,
    pub report: ReportSettings,
    pub pretrain: TrainConfig,
    pub continual: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            corpus: CorpusSettings::default(),
            model: ModelSettings::default(),
            report: ReportSettings::default(),
            pretrain: TrainConfig::pretrain(),
            continual: TrainConfig::continual(Strategy::IrDro),
        }
    }
}

// Overlay types: the same tree as `Settings` with every leaf optional.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    corpus: Option<CorpusOverlay>,
    model: Option<ModelOverlay>,
    report: Option<ReportOverlay>,
    pretrain: Option<PhaseOverlay>,
    continual: Option<PhaseOverlay>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusOverlay {
    path: Option<PathBuf>,
    sample_length: Option<usize>,
    noise_fraction: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelOverlay {
    vocab_size: Option<usize>,
    context_window: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    init_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportOverlay {
    histogram_bins: Option<usize>,
    top_k: Option<usize>,
    mid_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseOverlay {
    batch_size: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    grad_combine: Option<GradCombine>,
    loss_scale: Option<LossScale>,
    selector: Option<SelectorOverlay>,
    optimizer: Option<OptimizerOverlay>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorOverlay {
    pub strategy: Option<Strategy>,
    pub n1: Option<f64>,
    pub n2: Option<f64>,
    pub r: Option<f64>,
    pub estimator: Option<WeightEstimator>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverlay {
    pub kind: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub weight_decay: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SelectorOverlay {
    /// Changing the strategy resets `n1`/`n2` to that strategy's defaults
    /// unless they are given alongside it.
    pub fn apply(&self, spec: &mut SelectorSpec) {
        if let Some(s) = self.strategy {
            if s != spec.strategy {
                let (n1, n2) = s.default_fractions();
                spec.n1 = n1;
                spec.n2 = n2;
            }
            spec.strategy = s;
        }
        set(&mut spec.n1, self.n1);
        set(&mut spec.n2, self.n2);
        set(&mut spec.r, self.r);
        set(&mut spec.estimator, self.estimator);
    }
}

impl OptimizerOverlay {
    pub fn apply(&self, cfg: &mut OptimizerConfig) {
        set(&mut cfg.kind, self.kind);
        set(&mut cfg.learning_rate, self.learning_rate);
        set(&mut cfg.beta1, self.beta1);
        set(&mut cfg.beta2, self.beta2);
        set(&mut cfg.epsilon, self.epsilon);
        set(&mut cfg.weight_decay, self.weight_decay);
    }
}

impl PhaseOverlay {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.grad_combine, self.grad_combine);
        set(&mut cfg.loss_scale, self.loss_scale);
        if let Some(s) = &self.selector {
            s.apply(&mut cfg.selector);
        }
        if let Some(o) = &self.optimizer {
            o.apply(&mut cfg.optimizer);
        }
    }
}

impl Settings {
    /// Parses TOML text over the defaults. `origin` names the source in
    /// error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config {
            origin: origin.to_string(),
            message: e.to_string().trim_end().replace('\n', " | "),
        })?;
        let mut s = Settings::default();
        if let Some(seed) = file.seed {
            s.seed = seed;
        }
        s.pretrain.seed = s.seed;
        s.continual.seed = s.seed;
        if let Some(c) = file.corpus {
            set(&mut s.corpus.path, c.path);
            set(&mut s.corpus.sample_length, c.sample_length);
            set(&mut s.corpus.noise_fraction, c.noise_fraction);
            set(&mut s.corpus.seed, c.seed);
        }
        if let Some(m) = file.model {
            set(&mut s.model.vocab_size, m.vocab_size);
            set(&mut s.model.context_window, m.context_window);
            set(&mut s.model.embed_dim, m.embed_dim);
            set(&mut s.model.hidden_dim, m.hidden_dim);
            set(&mut s.model.init_scale, m.init_scale);
        }
        if let Some(r) = file.report {
            set(&mut s.report.histogram_bins, r.histogram_bins);
            set(&mut s.report.top_k, r.top_k);
            set(&mut s.report.mid_k, r.mid_k);
        }
        if let Some(p) = &file.pretrain {
            p.apply(&mut s.pretrain);
        }
        if let Some(p) = &file.continual {
            p.apply(&mut s.continual);
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::from_toml(&text, &path.display().to_string())
    }

    /// Sets the run seed for both phases.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.continual.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::Config {
            origin: "settings".into(),
            message,
        };
        self.model.config().validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            return Err(invalid(format!("model.init_scale = {}", self.model.init_scale)));
        }
        if self.report.histogram_bins == 0 {
            return Err(invalid("report.histogram_bins must be at least 1".into()));
        }
        for (name, phase) in [("pretrain", &self.pretrain), ("continual", &self.continual)] {
            phase
                .validate()
                .map_err(|e| invalid(format!("[{name}] {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }

    /// First 12 hex digits of the SHA-256 of [`Settings::to_toml`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(Settings::from_toml("", "test").unwrap(), Settings::default());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut s = Settings::default();
        s.set_seed(7);
        s.continual.selector = SelectorSpec::new(Strategy::MidRanking);
        s.continual.selector.estimator = WeightEstimator::RunningAverage { decay: 0.3 };
        s.corpus.path = PathBuf::from("data/text.txt");
        let text = s.to_toml();
        let back = Settings::from_toml(&text, "snapshot").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn partial_overlay() {
        let s = Settings::from_toml(
            "seed = 3\n[continual]\nsteps = 5\n[continual.selector]\nstrategy = \"midranking\"\n",
            "test",
        )
        .unwrap();
        assert_eq!(s.continual.steps, 5);
        assert_eq!(s.continual.seed, 3);
        assert_eq!(s.pretrain.seed, 3);
        assert_eq!(s.continual.selector.strategy, Strategy::MidRanking);
        assert_eq!((s.continual.selector.n1, s.continual.selector.n2), (0.25, 0.25));
        assert_eq!(s.continual.batch_size, 8);
        assert_eq!(s.pretrain, TrainConfig { seed: 3, ..TrainConfig::pretrain() });
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = Settings::from_toml("seed = 1\n[continual]\nstpes = 5\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stpes"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(err.category().exit_code(), 3);

        let err = Settings::from_toml("[continual]\nsteps = \"many\"\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = Settings::default();
        let mut b = a.clone();
        b.continual.selector.r = 5.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 12);
    }
}
