//! Command-line front end.
//!
//! Every failure ends with one line on stderr of the form
//! `error category=<name> exit=<code>: <message>`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerOverlay, SelectorOverlay, Settings};
use crate::data::{build_corpus, write_manifest, write_synthetic_text, Corpus};
use crate::error::{Category, Error, Result};
use crate::model::Sample;
use crate::report::{compare_strategies, evaluate, format_sig, loss_ranking_report, sweep, SweepAxis};
use crate::run::{continual_run, pretrain_run, report_name, InitRef, Phase};
use crate::select::{Strategy, WeightEstimator};
use crate::reweight::DEFAULT_RUNNING_AVERAGE_DECAY;
use crate::train::{GradCombine, LossScale, TrainConfig};
use crate::verify::{verify_math, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "irdro", version, about = "Robust continual training of a byte-level toy language model")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// ERM pretraining from a seeded initialization.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Continual training of an existing checkpoint.
    Continual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        selector: SelectorFlags,
        /// Checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
    },
    /// Held-out and noise-subset perplexity of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Highest-loss and median-rank training samples under a checkpoint.
    InspectLosses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        mid_k: Option<usize>,
    },
    /// Tabulate finished runs.
    Compare {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Continual training at several values of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        selector: SelectorFlags,
        #[arg(long)]
        init: PathBuf,
        /// `steps` or `learning-rate`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the mathematical property suite.
    VerifyMath {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Build the corpus from the configured text file and write its manifest.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Write deterministic Latin-like text usable as a corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Corpus text file.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    grad_combine: Option<CombineArg>,
    #[arg(long, value_enum)]
    loss_scale: Option<LossScaleArg>,
}

#[derive(Debug, Args)]
struct SelectorFlags {
    /// uniform, highranking, midranking, lowranking or irdro.
    #[arg(long)]
    selector: Option<Strategy>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    n1: Option<f64>,
    #[arg(long)]
    n2: Option<f64>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Decay of the running-average estimator.
    #[arg(long)]
    decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CombineArg {
    Algorithm1Scaled,
    ConvexCombination,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossScaleArg {
    TokenMean,
    TokenSum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    ClosedForm,
    RunningAverage,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        if let Some(seed) = self.seed {
            s.set_seed(seed);
        }
        if let Some(path) = &self.corpus {
            s.corpus.path = path.clone();
        }
        Ok(s)
    }

    fn out_dir(&self, default: impl FnOnce() -> PathBuf) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(default)
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        OptimizerOverlay {
            learning_rate: self.lr,
            ..Default::default()
        }
        .apply(&mut cfg.optimizer);
        if let Some(v) = self.grad_combine {
            cfg.grad_combine = match v {
                CombineArg::Algorithm1Scaled => GradCombine::Algorithm1Scaled,
                CombineArg::ConvexCombination => GradCombine::ConvexCombination,
            };
        }
        if let Some(v) = self.loss_scale {
            cfg.loss_scale = match v {
                LossScaleArg::TokenMean => LossScale::TokenMean,
                LossScaleArg::TokenSum => LossScale::TokenSum,
            };
        }
    }
}

impl SelectorFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        let current_decay = match cfg.selector.estimator {
            WeightEstimator::RunningAverage { decay } => Some(decay),
            WeightEstimator::ClosedForm => None,
        };
        let estimator = match (self.estimator, self.decay) {
            (Some(EstimatorArg::ClosedForm), _) => Some(WeightEstimator::ClosedForm),
            (Some(EstimatorArg::RunningAverage), d) => Some(WeightEstimator::RunningAverage {
                decay: d.or(current_decay).unwrap_or(DEFAULT_RUNNING_AVERAGE_DECAY),
            }),
            (None, Some(decay)) if current_decay.is_some() => {
                Some(WeightEstimator::RunningAverage { decay })
            }
            (None, _) => None,
        };
        SelectorOverlay {
            strategy: self.selector,
            n1: self.n1,
            n2: self.n2,
            r: self.r,
            estimator,
        }
        .apply(&mut cfg.selector);
    }
}

fn load_corpus(settings: &Settings) -> Result<Corpus> {
    build_corpus(&settings.corpus.path, settings.corpus.params())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn validated(settings: Settings) -> Result<Settings> {
    settings.validate()?;
    Ok(settings)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCommand::Synth { out, bytes, seed }) => {
            ensure_parent(&out)?;
            write_synthetic_text(&out, bytes, seed)?;
            println!("wrote {bytes} bytes to {}", out.display());
        }
        Command::Corpus(CorpusCommand::Build { common }) => {
            let settings = validated(common.settings()?)?;
            let corpus = load_corpus(&settings)?;
            let manifest = corpus.manifest();
            let dir = common.out_dir(|| PathBuf::from("."));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("corpus-{}.json", manifest.fingerprint));
            write_manifest(&path, &manifest)?;
            println!(
                "corpus {} windows={} noise={} train={} heldout={} manifest={}",
                manifest.fingerprint,
                manifest.window_count,
                manifest.noise.len(),
                manifest.train_count,
                manifest.heldout_count,
                path.display()
            );
        }
        Command::Pretrain { common, train } => {
            let mut settings = common.settings()?;
            train.apply(&mut settings.pretrain);
            let settings = validated(settings)?;
            let corpus = load_corpus(&settings)?;
            let dir = common.out_dir(|| {
                PathBuf::from("runs").join(format!("pretrain-{}-s{}", settings.fingerprint(), settings.seed))
            });
            let outcome = pretrain_run(&dir, &settings, &corpus)?;
            print_run(&dir, Phase::Pretrain, &outcome.metrics);
        }
        Command::Continual {
            common,
            train,
            selector,
            init,
        } => {
            let mut settings = common.settings()?;
            train.apply(&mut settings.continual);
            selector.apply(&mut settings.continual);
            let settings = validated(settings)?;
            let corpus = load_corpus(&settings)?;
            let initial = Checkpoint::load(&init)?;
            let dir = common.out_dir(|| {
                PathBuf::from("runs").join(format!(
                    "{}-{}-s{}",
                    settings.continual.selector.strategy,
                    settings.fingerprint(),
                    settings.seed
                ))
            });
            let outcome = continual_run(&dir, &settings, &corpus, &initial, InitRef::of(&init, &initial))?;
            print_run(&dir, Phase::Continual, &outcome.metrics);
        }
        Command::Eval { common, checkpoint } => {
            let settings = validated(common.settings()?)?;
            let corpus = load_corpus(&settings)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let fp = settings.fingerprint();
            let report = evaluate(&ck.params, &corpus, settings.seed, &fp)?;
            let dir = common.out_dir(|| PathBuf::from("."));
            write_out(&dir.join(report_name("eval", &fp, settings.seed, "json")), &report.to_json())?;
            write_out(&dir.join(report_name("losses", &fp, settings.seed, "csv")), &report.losses_csv())?;
            println!(
                "clean_ppl={} noisy_ppl={}",
                format_sig(report.clean_perplexity),
                report.noisy_perplexity.map(format_sig).unwrap_or_else(|| "-".into())
            );
        }
        Command::InspectLosses {
            common,
            checkpoint,
            top_k,
            mid_k,
        } => {
            let mut settings = common.settings()?;
            if let Some(k) = top_k {
                settings.report.top_k = k;
            }
            if let Some(k) = mid_k {
                settings.report.mid_k = k;
            }
            let settings = validated(settings)?;
            let corpus = load_corpus(&settings)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let pool: Vec<(usize, &Sample)> =
                corpus.train_indices().iter().map(|&i| (i, corpus.sample(i))).collect();
            let ranking = loss_ranking_report(&ck.params, &pool, settings.report.top_k, settings.report.mid_k)?;
            let fp = settings.fingerprint();
            let dir = common.out_dir(|| PathBuf::from("."));
            write_out(&dir.join(report_name("ranking", &fp, settings.seed, "csv")), &ranking.to_csv())?;
            print!("{}", ranking.to_text());
            if let Some(share) = ranking.noise_share_of_high() {
                println!("noise share of top {}: {}", ranking.high.len(), format_sig(share));
            }
        }
        Command::Compare { runs, out_dir } => {
            let table = compare_strategies(&runs)?;
            let csv = table.to_csv();
            if let Some(dir) = out_dir {
                write_out(&dir.join(format!("comparison-{}.csv", table.corpus_fingerprint)), &csv)?;
            }
            print!("{csv}");
        }
        Command::Sweep {
            common,
            train,
            selector,
            init,
            axis,
            values,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let mut settings = common.settings()?;
            train.apply(&mut settings.continual);
            selector.apply(&mut settings.continual);
            let settings = validated(settings)?;
            let corpus = load_corpus(&settings)?;
            let initial = Checkpoint::load(&init)?;
            let init_ref = InitRef::of(&init, &initial);
            let fp = settings.fingerprint();
            let dir = common.out_dir(|| PathBuf::from("runs").join(format!("sweep-{fp}-s{}", settings.seed)));
            let baseline = evaluate(&initial.params, &corpus, settings.seed, &fp)?;
            let report = sweep(axis, &values, &baseline, &dir, |v, point_dir| {
                let mut s = settings.clone();
                match axis {
                    SweepAxis::Steps => {
                        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                            return Err(Error::InvalidParameter(format!("steps value {v} is not a count")));
                        }
                        s.continual.steps = v as usize;
                    }
                    SweepAxis::LearningRate => s.continual.optimizer.learning_rate = v,
                }
                Ok(continual_run(point_dir, &s, &corpus, &initial, init_ref.clone())?.metrics)
            })?;
            write_out(
                &dir.join(format!("sweep-{}-{fp}-s{}.csv", axis.name(), settings.seed)),
                &report.to_csv(),
            )?;
            print!("{}", report.to_csv());
            let failed: Vec<String> = report
                .failures()
                .map(|p| p.value.map(format_sig).unwrap_or_default())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Verification(format!(
                    "{} of {} sweep points failed: {}",
                    failed.len(),
                    report.points.len() - 1,
                    failed.join(", ")
                )));
            }
        }
        Command::VerifyMath { instances, seed } => {
            let report = verify_math(VerifyOptions {
                instances,
                seed,
                ..VerifyOptions::default()
            });
            println!("{report}");
            report.into_result()?;
        }
    }
    Ok(())
}

fn print_run(dir: &Path, phase: Phase, m: &crate::run::RunMetrics) {
    info!("{phase:?} run finished in {}", dir.display());
    println!(
        "run={} strategy={} seed={} steps={} clean_ppl={} noisy_ppl={} final_objective={}",
        dir.display(),
        m.strategy,
        m.seed,
        m.steps,
        format_sig(m.clean_perplexity),
        m.noisy_perplexity.map(format_sig).unwrap_or_else(|| "-".into()),
        m.final_objective.map(format_sig).unwrap_or_else(|| "-".into()),
    );
}

fn report_error(category: Category, message: &str) -> i32 {
    eprintln!(
        "error category={} exit={}: {}",
        category.name(),
        category.exit_code(),
        message.replace('\n', " | ")
    );
    category.exit_code()
}

/// Parses `argv` (including the program name) and runs it, returning the
/// process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            return report_error(Category::Usage, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => report_error(e.category(), &e.to_string()),
    }
}
