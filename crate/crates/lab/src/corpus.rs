//! Synthetic data with planted structure.
//!
//! Sequences are assembled from a library of short motifs (fixed n-grams
//! over the content vocabulary), so span corruption is learnable: seeing
//! the rest of a motif pins down the masked part. Classification tasks
//! reuse the motif library as class signatures.

use crate::mix_seed;
use moelab_core::model::EncDecBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const CONTENT_BASE: usize = 2;
pub const NUM_CONTENT: usize = 256;
pub const SENTINEL_BASE: usize = CONTENT_BASE + NUM_CONTENT;
pub const NUM_SENTINELS: usize = 16;
/// Fits `ModelConfig::default().vocab_size`.
pub const VOCAB_SIZE: usize = SENTINEL_BASE + NUM_SENTINELS;

pub fn sentinel_id(k: usize) -> usize {
    assert!(k < NUM_SENTINELS, "sentinel {k} out of range");
    SENTINEL_BASE + k
}

pub fn is_sentinel(id: usize) -> bool {
    (SENTINEL_BASE..SENTINEL_BASE + NUM_SENTINELS).contains(&id)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("sequence of length {0} is too short to corrupt")]
    SequenceTooShort(usize),
    #[error("mean span {0} must be at least 1")]
    BadMeanSpan(f64),
    #[error("corrupt fraction {0} must be in [0, 1)")]
    BadCorruptFraction(f64),
    #[error("corruption needs more than {NUM_SENTINELS} spans")]
    TooManySpans,
}

/// Seeded generator of motif-structured sequences. Every sequence is a
/// pure function of (corpus seed, index), so data order never depends
/// on consumption order.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    seed: u64,
    motifs: Vec<Vec<usize>>,
}

const NUM_MOTIFS: usize = 24;

impl SynthCorpus {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4d4f_5449));
        let motifs = (0..NUM_MOTIFS)
            .map(|_| {
                let len = rng.gen_range(3..=6);
                (0..len)
                    .map(|_| CONTENT_BASE + rng.gen_range(0..NUM_CONTENT))
                    .collect()
            })
            .collect();
        Self { seed, motifs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn motifs(&self) -> &[Vec<usize>] {
        &self.motifs
    }

    /// The `index`-th sequence: mostly motifs, occasionally a lone
    /// random symbol so the data is not a pure motif code.
    pub fn sequence(&self, index: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index));
        let mut out = Vec::with_capacity(len + 6);
        while out.len() < len {
            if rng.gen_bool(0.85) {
                let m = &self.motifs[rng.gen_range(0..self.motifs.len())];
                out.extend_from_slice(m);
            } else {
                out.push(CONTENT_BASE + rng.gen_range(0..NUM_CONTENT));
            }
        }
        out.truncate(len);
        out
    }

    /// One span-corruption batch for a training step. Batch `step` is a
    /// window into the deterministic sequence stream; `stream` keeps
    /// train and held-out data disjoint.
    pub fn span_batch(
        &self,
        stream: u64,
        step: u64,
        examples: usize,
        raw_len: usize,
        mean_span: f64,
        corrupt_fraction: f64,
    ) -> Result<EncDecBatch, CorpusError> {
        let mut enc_ids = Vec::with_capacity(examples);
        let mut dec_targets = Vec::with_capacity(examples);
        for i in 0..examples {
            let index = mix_seed(stream, step * examples as u64 + i as u64);
            let seq = self.sequence(index, raw_len);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(index, 0x5350_414e));
            let (input, target) = span_corrupt(&seq, mean_span, corrupt_fraction, &mut rng)?;
            enc_ids.push(input);
            dec_targets.push(target);
        }
        Ok(EncDecBatch { enc_ids, dec_targets })
    }
}

fn sample_geometric(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.gen();
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

/// Masks non-overlapping spans out of `sequence`.
///
/// Each span is replaced by one sentinel in the input (sentinels in
/// position order); the target lists every span as its sentinel followed
/// by the removed tokens. Span lengths are geometric with the given
/// mean, and the total masked count is round(len * corrupt_fraction).
pub fn span_corrupt(
    sequence: &[usize],
    mean_span: f64,
    corrupt_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
    let n = sequence.len();
    if n < 2 {
        return Err(CorpusError::SequenceTooShort(n));
    }
    if !(mean_span >= 1.0) {
        return Err(CorpusError::BadMeanSpan(mean_span));
    }
    if !(0.0..1.0).contains(&corrupt_fraction) {
        return Err(CorpusError::BadCorruptFraction(corrupt_fraction));
    }

    let mut budget = (n as f64 * corrupt_fraction).round() as usize;
    let mut covered = vec![false; n];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while budget > 0 {
        if spans.len() == NUM_SENTINELS {
            return Err(CorpusError::TooManySpans);
        }
        let len = sample_geometric(rng, mean_span).min(budget);
        let start = rng.gen_range(0..=n - len);
        attempts += 1;
        if covered[start..start + len].iter().any(|&c| c) {
            // Rejection sampling over placements; the cap only trips
            // when free gaps genuinely cannot hold another span.
            if attempts > 64 * n {
                break;
            }
            continue;
        }
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
        spans.push((start, len));
        budget -= len;
    }
    spans.sort_unstable();

    let mut input = Vec::with_capacity(n);
    let mut target = Vec::new();
    let mut pos = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        input.extend_from_slice(&sequence[pos..start]);
        input.push(sentinel_id(k));
        target.push(sentinel_id(k));
        target.extend_from_slice(&sequence[start..start + len]);
        pos = start + len;
    }
    input.extend_from_slice(&sequence[pos..]);
    Ok((input, target))
}

/// Inverse of `span_corrupt`: splice the target's spans back into the
/// input at their sentinels.
pub fn splice(input: &[usize], target: &[usize]) -> Vec<usize> {
    let mut span_of = vec![Vec::new(); NUM_SENTINELS];
    let mut current: Option<usize> = None;
    for &t in target {
        if is_sentinel(t) {
            current = Some(t - SENTINEL_BASE);
        } else if let Some(k) = current {
            span_of[k].push(t);
        }
    }
    let mut out = Vec::new();
    for &t in input {
        if is_sentinel(t) {
            out.extend_from_slice(&span_of[t - SENTINEL_BASE]);
        } else {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Sequence classification over motif signatures: each class owns two
/// motifs, an example contains both of them amid unrelated filler, and
/// the model answers with a label token.
#[derive(Debug, Clone)]
pub struct ClassTask {
    pub num_classes: usize,
    pub seq_len: usize,
    pub train: Vec<LabeledExample>,
    pub heldout: Vec<LabeledExample>,
}

impl ClassTask {
    pub fn label_token(class: usize) -> usize {
        CONTENT_BASE + class
    }

    pub fn batch(examples: &[LabeledExample]) -> EncDecBatch {
        EncDecBatch {
            enc_ids: examples.iter().map(|e| e.tokens.clone()).collect(),
            dec_targets: examples
                .iter()
                .map(|e| vec![Self::label_token(e.label)])
                .collect(),
        }
    }
}

/// Builds a balanced classification task. Labels cycle so every prefix
/// of the train set is near-balanced; held-out examples come from a
/// disjoint index range of the same distribution.
pub fn classification_task(
    corpus: &SynthCorpus,
    num_classes: usize,
    num_train: usize,
    num_heldout: usize,
    seq_len: usize,
    seed: u64,
) -> ClassTask {
    assert!(
        2 * num_classes <= corpus.motifs().len(),
        "{num_classes} classes need {} signature motifs, library has {}",
        2 * num_classes,
        corpus.motifs().len()
    );
    let make = |index: u64| -> LabeledExample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
        let class = (index as usize) % num_classes;
        let sig_a = &corpus.motifs()[2 * class];
        let sig_b = &corpus.motifs()[2 * class + 1];
        let mut tokens = Vec::with_capacity(seq_len + 8);
        // The bigger signature fragment always survives truncation; the
        // rest of the sequence is class-uninformative filler.
        tokens.extend_from_slice(sig_a);
        while tokens.len() < seq_len {
            if rng.gen_bool(0.5) {
                tokens.extend_from_slice(sig_b);
            } else {
                tokens.push(CONTENT_BASE + rng.gen_range(0..NUM_CONTENT));
            }
        }
        tokens.truncate(seq_len);
        // Cyclic shift so the signature is not always sequence-initial.
        let shift = rng.gen_range(0..seq_len);
        tokens.rotate_left(shift);
        LabeledExample { tokens, label: class }
    };
    ClassTask {
        num_classes,
        seq_len,
        train: (0..num_train as u64).map(make).collect(),
        heldout: (num_train as u64..(num_train + num_heldout) as u64).map(make).collect(),
    }
}
