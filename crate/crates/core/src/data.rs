//! Byte-level corpus: fixed-length windows, seeded noise injection,
//! train/held-out split and batch iteration.
//!
//! Construction is a pure function of `(source bytes, sample_length,
//! noise_fraction, seed)`. The chosen noise windows are *replaced* by
//! synthetic text: half of them by uniform random bytes, the other half by a
//! short random phrase repeated to fill the window. The last tenth of the
//! clean windows (by position) is held out for evaluation and never appears
//! in training batches.

use std::fs;
use std::path::{Path, PathBuf};

use lipsum::{MarkovChain, LIBER_PRIMUS};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Sample;

pub const HELDOUT_FRACTION: f64 = 0.1;
const MANIFEST_VERSION: u32 = 1;

/// Identity byte-to-token mapping.
pub fn tokenize(bytes: &[u8]) -> Vec<u16> {
    bytes.iter().map(|&b| u16::from(b)).collect()
}

/// Inverse of [`tokenize`]; tokens outside the byte range are dropped.
pub fn detokenize(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    RandomBytes,
    RepeatedPhrase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub index: usize,
    pub kind: NoiseKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub sample_length: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            sample_length: 64,
            noise_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Everything needed to rebuild a corpus from its source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub fingerprint: String,
    pub source_sha256: String,
    pub source_len: usize,
    pub sample_length: usize,
    pub noise_fraction: f64,
    pub seed: u64,
    pub window_count: usize,
    pub noise: Vec<NoiseEntry>,
    /// Window index at which the held-out clean windows begin; every clean
    /// window at or after it is held out.
    pub heldout_start: usize,
    pub train_count: usize,
    pub heldout_count: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    raw: Vec<u8>,
    params: CorpusParams,
    samples: Vec<Sample>,
    noise: Vec<NoiseEntry>,
    train: Vec<usize>,
    heldout: Vec<usize>,
    heldout_start: usize,
    source_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn random_phrase(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(3..=8);
    let mut phrase: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect();
    phrase.push(b' ');
    phrase
}

fn noise_window(kind: NoiseKind, len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    match kind {
        NoiseKind::RandomBytes => (0..len).map(|_| rng.gen::<u8>()).collect(),
        NoiseKind::RepeatedPhrase => {
            let phrase = random_phrase(rng);
            phrase.iter().copied().cycle().take(len).collect()
        }
    }
}

impl Corpus {
    pub fn from_bytes(raw: Vec<u8>, params: CorpusParams) -> Result<Self> {
        let CorpusParams {
            sample_length,
            noise_fraction,
            seed,
        } = params;
        if sample_length < 2 {
            return Err(Error::InvalidParameter(format!(
                "sample_length must be at least 2, got {sample_length}"
            )));
        }
        if !(0.0..1.0).contains(&noise_fraction) {
            return Err(Error::InvalidParameter(format!(
                "noise_fraction {noise_fraction} outside [0, 1)"
            )));
        }
        let count = raw.len() / sample_length;
        if count == 0 {
            return Err(Error::InvalidInput(format!(
                "corpus of {} bytes is shorter than one window of {sample_length}",
                raw.len()
            )));
        }

        let mut samples: Vec<Sample> = raw
            .chunks_exact(sample_length)
            .enumerate()
            .map(|(i, w)| Sample::new(tokenize(w), false, (i * sample_length) as u64))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_count = (noise_fraction * count as f64).floor() as usize;
        let chosen = index::sample(&mut rng, count, noise_count).into_vec();
        let random_half = noise_count.div_ceil(2);
        let mut noise: Vec<NoiseEntry> = chosen
            .iter()
            .enumerate()
            .map(|(k, &index)| NoiseEntry {
                index,
                kind: if k < random_half {
                    NoiseKind::RandomBytes
                } else {
                    NoiseKind::RepeatedPhrase
                },
            })
            .collect();
        noise.sort_by_key(|e| e.index);
        for entry in &noise {
            let sample = &mut samples[entry.index];
            sample.tokens = tokenize(&noise_window(entry.kind, sample_length, &mut rng));
            sample.is_noise = true;
        }

        let clean: Vec<usize> = (0..count).filter(|&i| !samples[i].is_noise).collect();
        let heldout_count = (clean.len() as f64 * HELDOUT_FRACTION).floor() as usize;
        let heldout = clean[clean.len() - heldout_count..].to_vec();
        let heldout_start = heldout.first().copied().unwrap_or(count);
        let train: Vec<usize> = (0..count)
            .filter(|&i| samples[i].is_noise || i < heldout_start)
            .collect();

        Ok(Corpus {
            source_sha256: sha256_hex(&raw),
            raw,
            params,
            samples,
            noise,
            train,
            heldout,
            heldout_start,
        })
    }

    pub fn params(&self) -> &CorpusParams {
        &self.params
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn noise(&self) -> &[NoiseEntry] {
        &self.noise
    }

    /// Window indices available for training (all noise plus the leading
    /// clean windows).
    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn heldout_indices(&self) -> &[usize] {
        &self.heldout
    }

    pub fn heldout_samples(&self) -> Vec<&Sample> {
        self.heldout.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn noisy_samples(&self) -> Vec<&Sample> {
        self.noise.iter().map(|e| &self.samples[e.index]).collect()
    }

    pub fn train_samples(&self) -> Vec<&Sample> {
        self.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn fingerprint(&self) -> String {
        let key = format!(
            "irdro-corpus-v{MANIFEST_VERSION}|{}|{}|{:016x}|{}|{:016x}",
            self.source_sha256,
            self.params.sample_length,
            self.params.noise_fraction.to_bits(),
            self.params.seed,
            HELDOUT_FRACTION.to_bits(),
        );
        sha256_hex(key.as_bytes())[..16].to_string()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            version: MANIFEST_VERSION,
            fingerprint: self.fingerprint(),
            source_sha256: self.source_sha256.clone(),
            source_len: self.raw.len(),
            sample_length: self.params.sample_length,
            noise_fraction: self.params.noise_fraction,
            seed: self.params.seed,
            window_count: self.samples.len(),
            noise: self.noise.clone(),
            heldout_start: self.heldout_start,
            train_count: self.train.len(),
            heldout_count: self.heldout.len(),
        }
    }

    /// Seeded batches over the training split.
    pub fn train_batches(&self, batch_size: usize, seed: u64) -> Result<Batches> {
        batches(self.train.clone(), batch_size, seed)
    }
}

/// Reads `path` as raw bytes and builds the corpus.
pub fn build_corpus(path: impl AsRef<Path>, params: CorpusParams) -> Result<Corpus> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(raw, params).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::format(path, msg),
        other => other,
    })
}

/// Rebuilds a corpus from its manifest and checks that the result matches.
pub fn corpus_from_manifest(source: &Path, manifest: &CorpusManifest) -> Result<Corpus> {
    let corpus = build_corpus(
        source,
        CorpusParams {
            sample_length: manifest.sample_length,
            noise_fraction: manifest.noise_fraction,
            seed: manifest.seed,
        },
    )?;
    if corpus.manifest() != *manifest {
        return Err(Error::format(
            source,
            format!(
                "rebuilt corpus {} does not match manifest {}",
                corpus.fingerprint(),
                manifest.fingerprint
            ),
        ));
    }
    Ok(corpus)
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Endless iterator of index batches: each pass shuffles the pool, yields
/// consecutive full batches and drops the ragged tail.
#[derive(Debug, Clone)]
pub struct Batches {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    pass: usize,
}

pub fn batches(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Batches> {
    if batch_size == 0 || batch_size > pool.len() {
        return Err(Error::InvalidParameter(format!(
            "batch size {batch_size} invalid for {} samples",
            pool.len()
        )));
    }
    Ok(Batches {
        order: Vec::new(),
        cursor: 0,
        pool,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pass: 0,
    })
}

impl Batches {
    /// Number of completed reshuffles.
    pub fn pass(&self) -> usize {
        self.pass
    }

    pub fn batches_per_pass(&self) -> usize {
        self.pool.len() / self.batch_size
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.order.is_empty() || self.cursor + self.batch_size > self.order.len() {
            if !self.order.is_empty() {
                self.pass += 1;
            }
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(batch)
    }
}

/// Deterministic Latin text: an order-two word Markov chain fitted to the
/// first book of Cicero's *De finibus bonorum et malorum* (public domain),
/// sampled with a seeded generator and wrapped into lines. Output length is
/// exactly `len` bytes of ASCII.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut chain = MarkovChain::new();
    chain.learn(LIBER_PRIMUS);
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 64);
    let mut line = 0;
    for word in chain.iter_with_rng(rng) {
        if out.len() >= len {
            break;
        }
        if line > 0 {
            if line + word.len() > 72 {
                out.push(b'\n');
                line = 0;
            } else {
                out.push(b' ');
                line += 1;
            }
        }
        out.extend_from_slice(word.as_bytes());
        line += word.len();
    }
    out.truncate(len);
    out
}

/// Writes [`synthetic_text`] to `path`.
pub fn write_synthetic_text(path: &Path, len: usize, seed: u64) -> Result<PathBuf> {
    fs::write(path, synthetic_text(len, seed)).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn corpus(len: usize, sample_length: usize, noise_fraction: f64, seed: u64) -> Corpus {
        Corpus::from_bytes(
            synthetic_text(len, 7),
            CorpusParams {
                sample_length,
                noise_fraction,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(detokenize(&tokenize(&all)), all);
    }

    #[test]
    fn window_count() {
        let c = corpus(1000, 100, 0.0, 1);
        assert_eq!(c.samples().len(), 10);
        assert!(c.samples().iter().all(|s| !s.is_noise && s.tokens.len() == 100));
        assert_eq!(c.samples()[3].source_offset, 300);
        assert_eq!(c.sample(3).tokens, tokenize(&c.raw()[300..400]));
    }

    #[test]
    fn noise_count_is_exact() {
        let c = corpus(100 * 50, 50, 0.2, 3);
        assert_eq!(c.samples().len(), 100);
        assert_eq!(c.samples().iter().filter(|s| s.is_noise).count(), 20);
        let random = c.noise().iter().filter(|e| e.kind == NoiseKind::RandomBytes).count();
        assert_eq!(random, 10);
    }

    #[test]
    fn repeated_phrase_noise_is_periodic() {
        let c = corpus(100 * 50, 50, 0.2, 3);
        for e in c.noise().iter().filter(|e| e.kind == NoiseKind::RepeatedPhrase) {
            let t = &c.sample(e.index).tokens;
            let period = t.iter().position(|&b| b == b' ' as u16).unwrap() + 1;
            assert!((4..=9).contains(&period));
            assert!(t.iter().enumerate().skip(period).all(|(i, &b)| b == t[i - period]));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = corpus(20_000, 64, 0.2, 9);
        let b = corpus(20_000, 64, 0.2, 9);
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.manifest(), b.manifest());
        let c = corpus(20_000, 64, 0.2, 10);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn split_is_disjoint_and_heldout_is_clean_tail() {
        let c = corpus(64 * 300, 64, 0.2, 5);
        let train: HashSet<_> = c.train_indices().iter().copied().collect();
        let clean = c.samples().iter().filter(|s| !s.is_noise).count();
        assert_eq!(c.heldout_indices().len(), clean / 10);
        for &i in c.heldout_indices() {
            assert!(!train.contains(&i));
            assert!(!c.sample(i).is_noise);
        }
        assert_eq!(train.len() + c.heldout_indices().len(), c.samples().len());
        let start = c.manifest().heldout_start;
        assert!(c.heldout_indices().iter().all(|&i| i >= start));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = CorpusParams {
            sample_length: 100,
            noise_fraction: 0.0,
            seed: 0,
        };
        assert!(Corpus::from_bytes(vec![b'a'; 99], p).is_err());
        assert!(Corpus::from_bytes(vec![b'a'; 200], CorpusParams { sample_length: 1, ..p }).is_err());
        assert!(Corpus::from_bytes(vec![b'a'; 200], CorpusParams { noise_fraction: 1.0, ..p }).is_err());
        assert!(matches!(
            build_corpus("/nonexistent/corpus.txt", p),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn batch_pass_partitions() {
        let mut it = batches((0..10).collect(), 3, 4).unwrap();
        let pass: Vec<Vec<usize>> = (0..3).map(|_| it.next().unwrap()).collect();
        assert!(pass.iter().all(|b| b.len() == 3));
        let seen: HashSet<usize> = pass.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 9);
        assert_eq!(it.pass(), 0);
        it.next();
        assert_eq!(it.pass(), 1);
        assert!(batches((0..3).collect(), 4, 0).is_err());
        assert!(batches((0..3).collect(), 0, 0).is_err());
    }

    #[test]
    fn batch_orderings_depend_on_seed() {
        let a: Vec<_> = batches((0..50).collect(), 5, 1).unwrap().take(10).collect();
        let b: Vec<_> = batches((0..50).collect(), 5, 2).unwrap().take(10).collect();
        let a2: Vec<_> = batches((0..50).collect(), 5, 1).unwrap().take(10).collect();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn synthetic_text_is_ascii_and_seeded() {
        let t = synthetic_text(5000, 1);
        assert_eq!(t.len(), 5000);
        assert!(t.is_ascii());
        assert_eq!(t, synthetic_text(5000, 1));
        assert_ne!(t, synthetic_text(5000, 2));
    }
}
