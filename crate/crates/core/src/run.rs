//! Run directories and the pretrain / continual workflows that fill them.
//!
//! ```text
//! <run>/manifest.json                   RunManifest, written before the first step
//! <run>/config.toml                     effective Settings
//! <run>/checkpoint.bin                  final parameters and optimizer state
//! <run>/steps.jsonl                     one StepRecord per line
//! <run>/metrics.json                    RunMetrics
//! <run>/losses-<config>-s<seed>.csv     per-sample evaluation losses
//! <run>/coefficients-<config>-s<seed>.csv
//! ```
//!
//! Everything except `manifest.json` (which carries timestamps) is a
//! deterministic function of the settings, corpus and initial checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::Settings;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::report::{coefficient_histogram, evaluate};
use crate::select::Strategy;
use crate::train::{self, StepRecord, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Continual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl InitRef {
    pub fn of(path: &Path, checkpoint: &Checkpoint) -> Self {
        InitRef {
            path: path.to_path_buf(),
            sha256: Sha256::digest(checkpoint.to_bytes())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub phase: Phase,
    pub status: RunStatus,
    pub seed: u64,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    pub init: Option<InitRef>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub error: Option<String>,
    pub config: Settings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub phase: Phase,
    pub strategy: Strategy,
    pub seed: u64,
    pub steps: usize,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    pub clean_perplexity: f64,
    pub noisy_perplexity: Option<f64>,
    /// Batch objective of the last step.
    pub final_objective: Option<f64>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializes") + "\n")
}

pub fn report_name(prefix: &str, config_fingerprint: &str, seed: u64, ext: &str) -> String {
    format!("{prefix}-{config_fingerprint}-s{seed}.{ext}")
}

/// An open run directory.
pub struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates `path` and writes the config snapshot and a `running`
    /// manifest.
    pub fn create(path: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        write_file(&path.join(CONFIG_FILE), manifest.config.to_toml())?;
        let dir = RunDir {
            path: path.to_path_buf(),
            manifest,
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_manifest(&self) -> Result<()> {
        write_json(&self.path.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn finish(mut self, status: RunStatus, error: Option<String>) -> Result<()> {
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_steps(dir: &Path) -> Result<Vec<StepRecord>> {
    let path = dir.join(STEPS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// What a finished run hands back besides its directory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    pub metrics: RunMetrics,
}

fn execute(
    dir: &Path,
    settings: &Settings,
    corpus: &Corpus,
    phase: Phase,
    init: Option<InitRef>,
    train_fn: impl FnOnce(&mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<(Checkpoint, Vec<StepRecord>)>,
) -> Result<RunOutcome> {
    settings.validate()?;
    let config: &TrainConfig = match phase {
        Phase::Pretrain => &settings.pretrain,
        Phase::Continual => &settings.continual,
    };
    let fingerprint = settings.fingerprint();
    let run = RunDir::create(
        dir,
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            phase,
            status: RunStatus::Running,
            seed: config.seed,
            config_fingerprint: fingerprint.clone(),
            corpus_fingerprint: corpus.fingerprint(),
            init,
            started_unix: unix_now(),
            finished_unix: None,
            error: None,
            config: settings.clone(),
        },
    )?;

    let result = (|| -> Result<RunOutcome> {
        let steps_path = dir.join(STEPS_FILE);
        let file = File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
        let mut log = BufWriter::new(file);
        let (checkpoint, records) = train_fn(&mut |rec: &StepRecord| {
            if (rec.step + 1) % 100 == 0 {
                info!("step {} mean loss {:.4}", rec.step + 1, rec.mean_loss);
            }
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&steps_path, e))
        })?;
        log.flush().map_err(|e| Error::io(&steps_path, e))?;
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;

        let eval = evaluate(&checkpoint.params, corpus, config.seed, &fingerprint)?;
        write_file(
            &dir.join(report_name("losses", &fingerprint, config.seed, "csv")),
            eval.losses_csv(),
        )?;
        if !records.is_empty() {
            let hist = coefficient_histogram(&records, settings.report.histogram_bins)?;
            write_file(
                &dir.join(report_name("coefficients", &fingerprint, config.seed, "csv")),
                hist.to_csv(),
            )?;
        }
        let metrics = RunMetrics {
            phase,
            strategy: config.selector.strategy,
            seed: config.seed,
            steps: records.len(),
            config_fingerprint: fingerprint.clone(),
            corpus_fingerprint: corpus.fingerprint(),
            clean_perplexity: eval.clean_perplexity,
            noisy_perplexity: eval.noisy_perplexity,
            final_objective: records.last().map(|r| r.objective),
        };
        write_json(&dir.join(METRICS_FILE), &metrics)?;
        Ok(RunOutcome {
            checkpoint,
            records,
            metrics,
        })
    })();

    match &result {
        Ok(_) => run.finish(RunStatus::Completed, None)?,
        Err(e) => run.finish(RunStatus::Failed, Some(e.to_string()))?,
    }
    result
}

/// ERM pretraining from a seeded initialization into `dir`.
pub fn pretrain_run(dir: &Path, settings: &Settings, corpus: &Corpus) -> Result<RunOutcome> {
    let model = settings.model;
    execute(dir, settings, corpus, Phase::Pretrain, None, |on_step| {
        let params = ModelParams::init(model.config(), settings.pretrain.seed, model.init_scale)?;
        train::pretrain(params, corpus, &settings.pretrain, on_step)
    })
}

/// Continual training of `init` into `dir`.
pub fn continual_run(
    dir: &Path,
    settings: &Settings,
    corpus: &Corpus,
    init: &Checkpoint,
    init_ref: InitRef,
) -> Result<RunOutcome> {
    if *init.params.config() != settings.model.config() {
        return Err(Error::Config {
            origin: "settings".into(),
            message: format!(
                "[model] section {:?} does not match the initial checkpoint {:?}",
                settings.model.config(),
                init.params.config()
            ),
        });
    }
    execute(dir, settings, corpus, Phase::Continual, Some(init_ref), |on_step| {
        train::run_continual(init, corpus, &settings.continual, on_step)
    })
}
