//! Evaluation metrics and the CSV/JSON artifacts built from runs.
//!
//! Every float written to a CSV goes through [`format_sig`] so report files
//! are stable across platforms and diffable.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, NoiseKind};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Sample};
use crate::reweight::LossVector;
use crate::run::{read_metrics, RunMetrics};
use crate::select::{rank_by_loss, Strategy};
use crate::train::{per_sample_losses, StepRecord};

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    }
}

fn opt_sig(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

pub(crate) fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// `exp` of the token-weighted mean negative log-likelihood.
pub fn perplexity(params: &ModelParams, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty sample set".into()));
    }
    let losses = per_sample_losses(params, samples)?;
    Ok(perplexity_from_losses(&losses, samples))
}

fn perplexity_from_losses(losses: &[f64], samples: &[&Sample]) -> f64 {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for (l, s) in losses.iter().zip(samples) {
        nll += l * s.predictions() as f64;
        tokens += s.predictions();
    }
    (nll / tokens as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Clean,
    RandomBytes,
    RepeatedPhrase,
}

impl SampleKind {
    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Clean => "clean",
            SampleKind::RandomBytes => "random_bytes",
            SampleKind::RepeatedPhrase => "repeated_phrase",
        }
    }
}

fn kinds(corpus: &Corpus) -> Vec<SampleKind> {
    let mut kinds = vec![SampleKind::Clean; corpus.samples().len()];
    for e in corpus.noise() {
        kinds[e.index] = match e.kind {
            NoiseKind::RandomBytes => SampleKind::RandomBytes,
            NoiseKind::RepeatedPhrase => SampleKind::RepeatedPhrase,
        };
    }
    kinds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub id: usize,
    pub kind: SampleKind,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    /// Held-out clean windows.
    pub clean_perplexity: f64,
    /// Injected-noise windows; absent when the corpus has none.
    pub noisy_perplexity: Option<f64>,
    #[serde(skip)]
    pub samples: Vec<SampleLoss>,
}

/// Scores the held-out clean windows and every noise window.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    seed: u64,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let kinds = kinds(corpus);
    let mut ids: Vec<usize> = corpus.heldout_indices().to_vec();
    let clean_count = ids.len();
    ids.extend(corpus.noise().iter().map(|e| e.index));
    let samples: Vec<&Sample> = ids.iter().map(|&i| corpus.sample(i)).collect();
    if clean_count == 0 {
        return Err(Error::InvalidInput("corpus has no held-out windows".into()));
    }
    let losses = per_sample_losses(params, &samples)?;
    let clean_perplexity = perplexity_from_losses(&losses[..clean_count], &samples[..clean_count]);
    let noisy_perplexity = (ids.len() > clean_count)
        .then(|| perplexity_from_losses(&losses[clean_count..], &samples[clean_count..]));
    Ok(EvalReport {
        seed,
        config_fingerprint: config_fingerprint.to_string(),
        corpus_fingerprint: corpus.fingerprint(),
        clean_perplexity,
        noisy_perplexity,
        samples: ids
            .iter()
            .zip(&losses)
            .map(|(&id, &loss)| SampleLoss {
                id,
                kind: kinds[id],
                loss,
            })
            .collect(),
    })
}

impl EvalReport {
    pub fn losses_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .samples
            .iter()
            .map(|s| vec![s.id.to_string(), s.kind.name().into(), format_sig(s.loss)])
            .collect();
        csv_string(&["id", "kind", "loss"], &rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedSample {
    pub rank: usize,
    pub id: usize,
    pub loss: f64,
    pub is_noise: bool,
    pub preview: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRanking {
    pub total: usize,
    pub high: Vec<RankedSample>,
    /// Samples around the median rank.
    pub mid: Vec<RankedSample>,
}

const PREVIEW_LEN: usize = 48;

fn preview(sample: &Sample) -> String {
    sample
        .tokens
        .iter()
        .take(PREVIEW_LEN)
        .map(|&t| match t {
            0x20..=0x7e => t as u8 as char,
            b if b == b'\n' as u16 || b == b'\t' as u16 => ' ',
            _ => '.',
        })
        .collect()
}

/// Highest-loss and median-rank samples of `samples` (pairs of corpus id and
/// sample) under `params`.
pub fn loss_ranking_report(
    params: &ModelParams,
    samples: &[(usize, &Sample)],
    top_k: usize,
    mid_k: usize,
) -> Result<LossRanking> {
    let n = samples.len();
    if top_k + mid_k > n {
        return Err(Error::InvalidParameter(format!(
            "top_k + mid_k = {} exceeds {n} samples",
            top_k + mid_k
        )));
    }
    if n == 0 {
        return Ok(LossRanking {
            total: 0,
            high: Vec::new(),
            mid: Vec::new(),
        });
    }
    let refs: Vec<&Sample> = samples.iter().map(|(_, s)| *s).collect();
    let losses = per_sample_losses(params, &refs)?;
    let order = rank_by_loss(&LossVector::new(losses.clone())?);
    let entry = |pos: usize| {
        let i = order[pos];
        RankedSample {
            rank: pos + 1,
            id: samples[i].0,
            loss: losses[i],
            is_noise: samples[i].1.is_noise,
            preview: preview(samples[i].1),
        }
    };
    let mid_start = (n - mid_k) / 2;
    Ok(LossRanking {
        total: n,
        high: (0..top_k).map(entry).collect(),
        mid: (mid_start..mid_start + mid_k).map(entry).collect(),
    })
}

impl LossRanking {
    pub fn noise_share_of_high(&self) -> Option<f64> {
        (!self.high.is_empty())
            .then(|| self.high.iter().filter(|s| s.is_noise).count() as f64 / self.high.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = [("high", &self.high), ("mid", &self.mid)]
            .into_iter()
            .flat_map(|(section, list)| {
                list.iter().map(move |s| {
                    vec![
                        section.to_string(),
                        s.rank.to_string(),
                        s.id.to_string(),
                        format_sig(s.loss),
                        s.is_noise.to_string(),
                        s.preview.clone(),
                    ]
                })
            })
            .collect();
        csv_string(&["section", "rank", "id", "loss", "is_noise", "preview"], &rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (title, list) in [("highest loss", &self.high), ("median rank", &self.mid)] {
            out.push_str(&format!("{title} ({} of {})\n", list.len(), self.total));
            for s in list {
                out.push_str(&format!(
                    "{:>6}  {:>9}  {:<5}  {}\n",
                    s.rank,
                    format_sig(s.loss),
                    if s.is_noise { "noise" } else { "clean" },
                    s.preview
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientHistogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub cumulative_percent: Vec<f64>,
}

/// Histogram of every logged sample weight over the observed range.
pub fn coefficient_histogram(records: &[StepRecord], bins: usize) -> Result<CoefficientHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    let values: Vec<f64> = records.iter().flat_map(|r| r.weights()).collect();
    if values.is_empty() {
        return Err(Error::InvalidInput("no logged weights to histogram".into()));
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        let pad = (lo.abs() * 1e-6).max(1e-12);
        lo -= pad;
        hi += pad;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + width * k as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for v in &values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let total = values.len();
    let mut cum = 0;
    let cumulative_percent = counts
        .iter()
        .map(|c| {
            cum += c;
            100.0 * cum as f64 / total as f64
        })
        .collect();
    Ok(CoefficientHistogram {
        edges,
        counts,
        cumulative_percent,
    })
}

impl CoefficientHistogram {
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.counts.len())
            .map(|k| {
                vec![
                    format_sig(self.edges[k]),
                    format_sig(self.edges[k + 1]),
                    self.counts[k].to_string(),
                    format_sig(self.cumulative_percent[k]),
                ]
            })
            .collect();
        csv_string(&["lower", "upper", "count", "cumulative_percent"], &rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianRow {
    pub strategy: Strategy,
    pub runs: usize,
    pub clean_perplexity: f64,
    pub noisy_perplexity: Option<f64>,
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub corpus_fingerprint: String,
    pub detail: Vec<ComparisonRow>,
    pub medians: Vec<MedianRow>,
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn median_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.and_then(|v| median(&v))
}

/// Reads `metrics.json` from each run directory and tabulates them.
pub fn compare_strategies(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("compare needs at least one run directory".into()));
    }
    let mut detail = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        detail.push(ComparisonRow {
            run: dir.display().to_string(),
            metrics: read_metrics(dir)?,
        });
    }
    let corpus = detail[0].metrics.corpus_fingerprint.clone();
    if let Some(other) = detail.iter().find(|r| r.metrics.corpus_fingerprint != corpus) {
        return Err(Error::Verification(format!(
            "runs use different corpora: {} has {}, {} has {}",
            detail[0].run, corpus, other.run, other.metrics.corpus_fingerprint
        )));
    }
    let position = |s: Strategy| Strategy::ALL.iter().position(|&x| x == s).unwrap();
    detail.sort_by(|a, b| {
        (position(a.metrics.strategy), a.metrics.seed, &a.run).cmp(&(
            position(b.metrics.strategy),
            b.metrics.seed,
            &b.run,
        ))
    });
    let medians = Strategy::ALL
        .iter()
        .filter_map(|&strategy| {
            let rows: Vec<&RunMetrics> = detail
                .iter()
                .map(|r| &r.metrics)
                .filter(|m| m.strategy == strategy)
                .collect();
            (!rows.is_empty()).then(|| MedianRow {
                strategy,
                runs: rows.len(),
                clean_perplexity: median_of(rows.iter().map(|m| Some(m.clean_perplexity)))
                    .expect("non-empty"),
                noisy_perplexity: median_of(rows.iter().map(|m| m.noisy_perplexity)),
                final_objective: median_of(rows.iter().map(|m| m.final_objective)),
            })
        })
        .collect();
    Ok(Comparison {
        corpus_fingerprint: corpus,
        detail,
        medians,
    })
}

impl Comparison {
    pub fn median(&self, strategy: Strategy) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .detail
            .iter()
            .map(|r| {
                let m = &r.metrics;
                vec![
                    "run".into(),
                    m.strategy.name().into(),
                    m.seed.to_string(),
                    r.run.clone(),
                    format_sig(m.clean_perplexity),
                    opt_sig(m.noisy_perplexity),
                    opt_sig(m.final_objective),
                ]
            })
            .collect();
        rows.extend(self.medians.iter().map(|m| {
            vec![
                "median".into(),
                m.strategy.name().into(),
                String::new(),
                format!("{} runs", m.runs),
                format_sig(m.clean_perplexity),
                opt_sig(m.noisy_perplexity),
                opt_sig(m.final_objective),
            ]
        }));
        csv_string(
            &["row", "strategy", "seed", "run", "clean_ppl", "noisy_ppl", "final_objective"],
            &rows,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Steps,
    LearningRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Steps => "steps",
            SweepAxis::LearningRate => "learning_rate",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "steps" => Ok(SweepAxis::Steps),
            "learning_rate" | "lr" => Ok(SweepAxis::LearningRate),
            other => Err(Error::Usage(format!(
                "unknown sweep axis {other:?} (expected steps or learning-rate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointStatus {
    Baseline,
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: Option<f64>,
    pub status: PointStatus,
    pub clean_perplexity: Option<f64>,
    pub noisy_perplexity: Option<f64>,
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    /// Baseline first, then one point per distinct value in input order.
    pub points: Vec<SweepPoint>,
}

/// Drops repeated values (bitwise equal), keeping first occurrences.
pub fn dedupe_values(values: &[f64]) -> Vec<f64> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        if seen.insert(v.to_bits()) {
            out.push(v);
        } else {
            warn!("duplicate sweep value {} ignored", format_sig(v));
        }
    }
    out
}

/// Runs one continual-training point per distinct value through `run_point`
/// (which receives the value and a fresh directory under `out_dir`). Failed
/// points are recorded and the sweep moves on.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    baseline: &EvalReport,
    out_dir: &Path,
    mut run_point: impl FnMut(f64, &Path) -> Result<RunMetrics>,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let mut points = vec![SweepPoint {
        value: None,
        status: PointStatus::Baseline,
        clean_perplexity: Some(baseline.clean_perplexity),
        noisy_perplexity: baseline.noisy_perplexity,
        final_objective: None,
    }];
    for v in dedupe_values(values) {
        let dir = out_dir.join(format!("{}-{}", axis.name(), format_sig(v)));
        match run_point(v, &dir) {
            Ok(m) => points.push(SweepPoint {
                value: Some(v),
                status: PointStatus::Ok,
                clean_perplexity: Some(m.clean_perplexity),
                noisy_perplexity: m.noisy_perplexity,
                final_objective: m.final_objective,
            }),
            Err(e) => {
                warn!("sweep point {}={} failed: {e}", axis.name(), format_sig(v));
                points.push(SweepPoint {
                    value: Some(v),
                    status: PointStatus::Failed(e.to_string()),
                    clean_perplexity: None,
                    noisy_perplexity: None,
                    final_objective: None,
                });
            }
        }
    }
    Ok(SweepReport { axis, points })
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points
            .iter()
            .filter(|p| matches!(p.status, PointStatus::Failed(_)))
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                let (status, message) = match &p.status {
                    PointStatus::Baseline => ("baseline", String::new()),
                    PointStatus::Ok => ("ok", String::new()),
                    PointStatus::Failed(m) => ("failed", m.clone()),
                };
                vec![
                    self.axis.name().into(),
                    opt_sig(p.value),
                    status.into(),
                    opt_sig(p.clean_perplexity),
                    opt_sig(p.noisy_perplexity),
                    opt_sig(p.final_objective),
                    message,
                ]
            })
            .collect();
        csv_string(
            &["axis", "value", "status", "clean_ppl", "noisy_ppl", "final_objective", "message"],
            &rows,
        )
    }
}
