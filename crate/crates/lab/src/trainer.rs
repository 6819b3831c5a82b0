//! One training run: span-corruption pre-training or classification
//! fine-tuning, with divergence detection, the per-step log the studies
//! consume, and held-out evaluation.

use crate::corpus::{ClassTask, CorpusError, SynthCorpus};
use crate::mix_seed;
use crate::optim::{Adam, Schedule, TrainableSubset};
use moelab_core::losses::LossConfig;
use moelab_core::model::{
    build_model, forward_batch, ModelConfig, ModelError, Params,
};
use moelab_core::ops::FfnKind;
use moelab_core::routing::Phase;
use moelab_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TAG_PARAMS: u64 = 0x5041;
const TAG_TRAIN_STREAM: u64 = 0x5452;
const TAG_HELDOUT_STREAM: u64 = 0x4845;
const TAG_STEP: u64 = 0x5354;
const TAG_EVAL: u64 = 0x4556;
const TAG_EPOCH: u64 = 0x4550;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("checkpoint is incompatible with this run: {0}")]
    IncompatibleCheckpoint(String),
}

/// Noise knobs the stability study toggles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseConfig {
    pub input_jitter: bool,
    pub dropout: f64,
    pub expert_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tokens per batch; divided by (enc_len + dec_len) to get examples.
    pub batch_tokens: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Bound on each parameter's applied update RMS; None disables.
    pub clip_update_rms: Option<f64>,
    pub seeds: Vec<u64>,
    pub loss: LossConfig,
    pub noise: NoiseConfig,
    /// Stability ablation: swap the gated FFN for plain ReLU.
    pub remove_geglu: bool,
    /// Stability ablation: drop the learned normalization gains.
    pub remove_rms_scale: bool,
    pub trainable_subset: TrainableSubset,
    pub reset_optimizer_state: bool,
    /// Diverged when loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    pub mean_span: f64,
    pub corrupt_fraction: f64,
    pub heldout_batches: usize,
    /// Fine-tuning: evaluate accuracy every this many steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_tokens: 384,
            peak_lr: 3e-3,
            warmup_steps: 200,
            clip_update_rms: None,
            seeds: vec![0],
            loss: LossConfig::default(),
            noise: NoiseConfig::default(),
            remove_geglu: false,
            remove_rms_scale: false,
            trainable_subset: TrainableSubset::All,
            reset_optimizer_state: false,
            divergence_factor: 10.0,
            mean_span: 3.0,
            corrupt_fraction: 0.15,
            heldout_batches: 4,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(TrainError::BadConfig(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_tokens == 0 {
            return Err(TrainError::BadConfig("batch_tokens must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::BadConfig("at least one seed".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(TrainError::BadConfig(format!(
                "divergence_factor {} must exceed 1",
                self.divergence_factor
            )));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn examples_per_batch(&self, cfg: &ModelConfig) -> usize {
        (self.batch_tokens / (cfg.enc_len + cfg.dec_len)).max(1)
    }
}

/// The model the run actually trains: the base architecture with the
/// config's ablation and noise knobs applied.
pub fn effective_model_config(base: &ModelConfig, tc: &TrainConfig) -> ModelConfig {
    let mut cfg = base.clone();
    if tc.remove_geglu {
        cfg.ffn = FfnKind::Relu;
    }
    if tc.remove_rms_scale {
        cfg.rms_scale = false;
    }
    cfg.router.jitter_eps = if tc.noise.input_jitter { 1e-2 } else { 0.0 };
    cfg.dropout = tc.noise.dropout;
    cfg.expert_dropout = tc.noise.expert_dropout;
    cfg
}

/// A FLOP-matched dense control: same widths and depths, but every FFN
/// slot is dense. The expert-layer stride is pushed past the layer
/// count, so no expert layer is ever planned.
pub fn dense_twin(base: &ModelConfig) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.expert_layer_freq = 1.0 / (2 * cfg.num_layers + 1) as f64;
    cfg.sparse_dense = false;
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub lb: f64,
    pub z: f64,
    pub total: f64,
    pub drop_fraction: f64,
    pub max_abs_router_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub stack: String,
    pub layer: usize,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub diverged: bool,
    pub initial_total: f64,
    /// Negative held-out cross entropy; higher is better.
    pub final_quality: f64,
    pub routing_entropy: Vec<LayerEntropy>,
}

impl RunReport {
    /// Time-averaged max |router logit| over the last half of the run.
    pub fn avg_max_logit_last_half(&self) -> f64 {
        let n = self.steps.len();
        if n == 0 {
            return 0.0;
        }
        let tail = &self.steps[n / 2..];
        tail.iter().map(|r| r.max_abs_router_logit).sum::<f64>() / tail.len() as f64
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub config: ModelConfig,
    pub params: Params,
    pub optimizer: Adam,
}

fn record_step(step: usize, fp: &moelab_core::model::ForwardPass) -> StepRecord {
    StepRecord {
        step,
        ce: fp.ce_value,
        lb: fp.lb_value,
        z: fp.z_value,
        total: fp.total_value,
        drop_fraction: fp.drop_fraction(),
        max_abs_router_logit: fp.max_abs_router_logit,
    }
}

fn diverged(total: f64, initial: f64, factor: f64) -> bool {
    !total.is_finite() || total > factor * initial.max(f64::MIN_POSITIVE)
}

/// Span-corruption pre-training from random initialization.
pub fn train(
    base: &ModelConfig,
    tc: &TrainConfig,
    corpus: &SynthCorpus,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let cfg = effective_model_config(base, tc);
    cfg.validate()?;
    let mut params = build_model(&cfg, mix_seed(seed, TAG_PARAMS))?;
    let mut opt = Adam::new(
        &params,
        Schedule { peak_lr: tc.peak_lr, warmup_steps: tc.warmup_steps },
        tc.clip_update_rms,
    );
    let examples = tc.examples_per_batch(&cfg);
    let train_stream = mix_seed(seed, TAG_TRAIN_STREAM);

    let mut records = Vec::with_capacity(tc.steps);
    let mut diverged_flag = false;
    let mut initial = f64::NAN;
    for step in 0..tc.steps {
        let batch = corpus.span_batch(
            train_stream,
            step as u64,
            examples,
            cfg.enc_len,
            tc.mean_span,
            tc.corrupt_fraction,
        )?;
        let fp = forward_batch(
            &cfg,
            &params,
            &batch,
            Phase::Train,
            &tc.loss,
            mix_seed(seed, TAG_STEP ^ step as u64),
        )?;
        let rec = record_step(step, &fp);
        if step == 0 {
            initial = rec.total;
        }
        records.push(rec);
        if diverged(rec.total, initial, tc.divergence_factor) {
            diverged_flag = true;
            break;
        }
        let grads = fp.gradients();
        opt.step(&mut params, &grads, tc.trainable_subset);
    }

    let (quality, entropy) = heldout_eval(&cfg, &params, corpus, tc, seed)?;
    Ok(TrainOutcome {
        report: RunReport {
            seed,
            steps: records,
            diverged: diverged_flag,
            initial_total: initial,
            final_quality: quality,
            routing_entropy: entropy,
        },
        config: cfg,
        params,
        optimizer: opt,
    })
}

/// Held-out quality (negative mean cross entropy, token-weighted) and
/// per-layer routing entropy of rank-1 expert preferences.
pub fn heldout_eval(
    cfg: &ModelConfig,
    params: &Params,
    corpus: &SynthCorpus,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(f64, Vec<LayerEntropy>), TrainError> {
    let examples = tc.examples_per_batch(cfg);
    let heldout_stream = mix_seed(seed, TAG_HELDOUT_STREAM);
    let mut ce_sum = 0.0;
    let mut token_count = 0usize;
    let mut counts: std::collections::BTreeMap<(String, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for b in 0..tc.heldout_batches.max(1) {
        let batch = corpus.span_batch(
            heldout_stream,
            b as u64,
            examples,
            cfg.enc_len,
            tc.mean_span,
            tc.corrupt_fraction,
        )?;
        let fp = forward_batch(
            cfg,
            params,
            &batch,
            Phase::Eval,
            &tc.loss,
            mix_seed(seed, TAG_EVAL ^ b as u64),
        )?;
        ce_sum += fp.ce_value * fp.target_token_count as f64;
        token_count += fp.target_token_count;
        for ev in &fp.moe_events {
            let key = (ev.stack.short().to_string(), ev.layer);
            let slot = counts
                .entry(key)
                .or_insert_with(|| vec![0; ev.decision.num_experts]);
            for token in &ev.decision.assignments {
                if let Some(first) = token.first() {
                    slot[first.expert] += 1;
                }
            }
        }
    }
    let quality = if token_count == 0 {
        0.0
    } else {
        -(ce_sum / token_count as f64)
    };
    let entropy = counts
        .into_iter()
        .map(|((stack, layer), c)| LayerEntropy {
            stack,
            layer,
            entropy: moelab_core::routing::entropy_from_counts(&c),
        })
        .collect();
    Ok((quality, entropy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_acc: f64,
    pub heldout_acc: f64,
    /// Dropped-candidate fraction across the held-out eval forwards.
    pub drop_fraction: f64,
}

pub struct FinetuneOutcome {
    pub report: RunReport,
    pub evals: Vec<EvalRecord>,
    pub final_train_acc: f64,
    pub peak_heldout_acc: f64,
    /// Drop fraction at the eval point with peak held-out accuracy.
    pub drop_at_peak: f64,
    /// First logged step with 100% training accuracy.
    pub steps_to_full_train_acc: Option<usize>,
    pub params: Params,
}

/// Classification fine-tuning from a pre-trained (or fresh) model.
/// `resume` carries checkpointed optimizer state; it is ignored when
/// the config asks for a reset.
pub fn finetune(
    cfg: &ModelConfig,
    start: Params,
    resume: Option<(Vec<Tensor>, Vec<Tensor>, usize)>,
    tc: &TrainConfig,
    task: &ClassTask,
    seed: u64,
) -> Result<FinetuneOutcome, TrainError> {
    tc.validate()?;
    if tc.remove_geglu || tc.remove_rms_scale {
        return Err(TrainError::IncompatibleCheckpoint(
            "architecture ablations cannot be applied to checkpointed weights".into(),
        ));
    }
    if cfg.vocab_size < ClassTask::label_token(task.num_classes - 1) + 1 {
        return Err(TrainError::IncompatibleCheckpoint(format!(
            "vocab {} cannot express {} labels",
            cfg.vocab_size, task.num_classes
        )));
    }
    let mut cfg = cfg.clone();
    cfg.router.jitter_eps = if tc.noise.input_jitter { 1e-2 } else { 0.0 };
    cfg.dropout = tc.noise.dropout;
    cfg.expert_dropout = tc.noise.expert_dropout;
    cfg.validate()?;

    let mut params = start;
    let mut opt = Adam::new(
        &params,
        Schedule { peak_lr: tc.peak_lr, warmup_steps: tc.warmup_steps },
        tc.clip_update_rms,
    );
    if let Some((m, v, steps)) = resume {
        if !tc.reset_optimizer_state {
            opt.restore(m, v, steps);
        }
    }

    let examples = tc.examples_per_batch(&cfg);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_EPOCH));
    order.shuffle(&mut epoch_rng);
    let mut cursor = 0usize;

    let mut records = Vec::with_capacity(tc.steps);
    let mut evals = Vec::new();
    let mut diverged_flag = false;
    let mut initial = f64::NAN;
    let mut steps_to_full = None;

    let evaluate = |step: usize,
                        params: &Params,
                        evals: &mut Vec<EvalRecord>,
                        steps_to_full: &mut Option<usize>|
     -> Result<(), TrainError> {
        let (train_acc, _) = accuracy(&cfg, params, &task.train, task.num_classes, examples, seed)?;
        let (heldout_acc, drop) =
            accuracy(&cfg, params, &task.heldout, task.num_classes, examples, seed)?;
        evals.push(EvalRecord { step, train_acc, heldout_acc, drop_fraction: drop });
        if steps_to_full.is_none() && train_acc == 1.0 {
            *steps_to_full = Some(step);
        }
        Ok(())
    };

    for step in 0..tc.steps {
        if cursor + examples > task.train.len() {
            order.shuffle(&mut epoch_rng);
            cursor = 0;
        }
        let take = examples.min(task.train.len());
        let chosen: Vec<_> = order[cursor..cursor + take]
            .iter()
            .map(|&i| task.train[i].clone())
            .collect();
        cursor += take;
        let batch = ClassTask::batch(&chosen);
        let fp = forward_batch(
            &cfg,
            &params,
            &batch,
            Phase::Train,
            &tc.loss,
            mix_seed(seed, TAG_STEP ^ step as u64),
        )?;
        let rec = record_step(step, &fp);
        if step == 0 {
            initial = rec.total;
        }
        records.push(rec);
        if diverged(rec.total, initial, tc.divergence_factor) {
            diverged_flag = true;
            break;
        }
        let grads = fp.gradients();
        opt.step(&mut params, &grads, tc.trainable_subset);

        if (step + 1) % tc.eval_every == 0 || step + 1 == tc.steps {
            evaluate(step + 1, &params, &mut evals, &mut steps_to_full)?;
            if steps_to_full.is_some() && evals.last().map_or(false, |e| e.heldout_acc == 1.0) {
                // Nothing left to learn or measure.
                break;
            }
        }
    }

    let final_train_acc = evals.last().map_or(0.0, |e| e.train_acc);
    let (peak_heldout_acc, drop_at_peak) = evals
        .iter()
        .map(|e| (e.heldout_acc, e.drop_fraction))
        .fold((0.0, 0.0), |best, cur| if cur.0 > best.0 { cur } else { best });

    Ok(FinetuneOutcome {
        report: RunReport {
            seed,
            steps: records,
            diverged: diverged_flag,
            initial_total: initial,
            final_quality: peak_heldout_acc,
            routing_entropy: Vec::new(),
        },
        evals,
        final_train_acc,
        peak_heldout_acc,
        drop_at_peak,
        steps_to_full_train_acc: steps_to_full,
        params,
    })
}

/// Label accuracy under deterministic evaluation. The prediction is the
/// argmax over label tokens of the first decoder position. Also returns
/// the dropped-candidate fraction aggregated over the eval forwards.
pub fn accuracy(
    cfg: &ModelConfig,
    params: &Params,
    examples: &[crate::corpus::LabeledExample],
    num_classes: usize,
    batch_examples: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut candidates = 0usize;
    let mut dropped = 0usize;
    for (bi, chunk) in examples.chunks(batch_examples.max(1)).enumerate() {
        let batch = ClassTask::batch(chunk);
        let fp = forward_batch(
            cfg,
            params,
            &batch,
            Phase::Eval,
            &LossConfig::default(),
            mix_seed(seed, TAG_EVAL ^ bi as u64),
        )?;
        for (logits, example) in fp.per_example_logits.iter().zip(chunk) {
            let row = logits.row(0).expect("decoder has at least one position");
            let mut best = 0usize;
            for c in 1..num_classes {
                if row[ClassTask::label_token(c)] > row[ClassTask::label_token(best)] {
                    best = c;
                }
            }
            if best == example.label {
                correct += 1;
            }
        }
        for ev in &fp.moe_events {
            candidates += ev.decision.candidate_count();
            dropped += ev.decision.dropped_count();
        }
    }
    let drop = if candidates == 0 { 0.0 } else { dropped as f64 / candidates as f64 };
    Ok((correct as f64 / examples.len() as f64, drop))
}
