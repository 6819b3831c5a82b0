//! A desk-scale encoder-decoder transformer with sparse expert layers.
//!
//! The model is built as a flat list of named parameters plus a layer
//! plan; the forward pass walks the plan and records everything on a
//! [`Graph`] tape, so one call yields loss values and exact gradients.
//!
//! Expert layers run the full routing pipeline per group. The routing
//! decision (which token goes to which expert slot) is made from
//! probability values off the tape; the combine gates stay on the tape,
//! so gradients flow to the router through both the gate weights and the
//! auxiliary losses. Dropped tokens ride the sublayer's residual
//! connection unchanged.
//!
//! Sequence positions are always routed, padding included; padding is
//! excluded from attention keys and from the cross-entropy instead. This
//! keeps group sizes static, which is the property capacity factors are
//! about in the first place.

use crate::graph::{Graph, Var};
use crate::losses::{self, LossConfig};
use crate::ops::{BiasMode, FfnKind};
use crate::routing::{
    self, DropPolicy, Phase, RouterConfig, RoutingDecision, RoutingError,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Reserved token ids. Content and sentinel ids live above these.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;

/// Additive attention-mask value for forbidden key positions. Large
/// enough that exp underflows to exactly 0 after max subtraction, so
/// masked positions have influence zero, not merely small.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackId {
    Encoder,
    Decoder,
}

impl StackId {
    pub fn short(&self) -> &'static str {
        match self {
            StackId::Encoder => "enc",
            StackId::Decoder => "dec",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{field} must be positive")]
    ZeroDimension { field: &'static str },
    #[error("{field} = {value} outside {range}")]
    BadFraction {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("batch-prioritized dropping peeks at future tokens; refusing to use it in a decoder expert layer")]
    BatchPrioritizedDecoder,
    #[error("relu ffn width 3*d_ff/2 must be integral, got d_ff = {d_ff}")]
    OddReluWidth { d_ff: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("vocab_size {0} too small for reserved ids")]
    VocabTooSmall(usize),
    #[error("parameter {name} missing; params do not match this config")]
    MissingParam { name: String },
    #[error("batch has no target tokens to score")]
    EmptyTargets,
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer layers per stack.
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_kv: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    /// Fraction of FFN slots that are expert layers; 1/freq rounds to
    /// the stride k, and every k-th FFN slot (per stack) is sparse.
    pub expert_layer_freq: f64,
    /// Insert an extra dense FFN immediately after each sparse layer.
    pub sparse_dense: bool,
    pub ffn: FfnKind,
    /// Learned gain on RMS normalization; false is the ablation.
    pub rms_scale: bool,
    pub bias_mode: BiasMode,
    pub dropout: f64,
    pub expert_dropout: f64,
    pub router: RouterConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 32,
            d_ff: 64,
            d_kv: 8,
            num_heads: 2,
            vocab_size: 274,
            enc_len: 16,
            dec_len: 8,
            expert_layer_freq: 0.5,
            sparse_dense: false,
            ffn: FfnKind::Geglu,
            rms_scale: true,
            bias_mode: BiasMode::None,
            dropout: 0.0,
            expert_dropout: 0.0,
            router: RouterConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_kv", self.d_kv),
            ("num_heads", self.num_heads),
            ("enc_len", self.enc_len),
            ("dec_len", self.dec_len),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroDimension { field });
            }
        }
        if self.vocab_size < 4 {
            return Err(ModelError::VocabTooSmall(self.vocab_size));
        }
        if !(self.expert_layer_freq > 0.0 && self.expert_layer_freq <= 1.0) {
            return Err(ModelError::BadFraction {
                field: "expert_layer_freq",
                value: self.expert_layer_freq,
                range: "(0, 1]",
            });
        }
        for (field, v) in [("dropout", self.dropout), ("expert_dropout", self.expert_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ModelError::BadFraction {
                    field,
                    value: v,
                    range: "[0, 1)",
                });
            }
        }
        if self.ffn == FfnKind::Relu && (3 * self.d_ff) % 2 != 0 {
            return Err(ModelError::OddReluWidth { d_ff: self.d_ff });
        }
        self.router.validate()?;
        if self.router.drop_policy == DropPolicy::BatchPrioritized
            && layer_plan(self)
                .iter()
                .any(|s| s.stack == StackId::Decoder && s.kind == SublayerKind::SparseFfn)
        {
            return Err(ModelError::BatchPrioritizedDecoder);
        }
        Ok(())
    }

    /// Expert-layer stride: every k-th FFN slot is sparse.
    pub fn sparse_stride(&self) -> usize {
        ((1.0 / self.expert_layer_freq).round() as usize).max(1)
    }

    /// Hidden width of the ReLU ablation, sized so parameters and FLOPs
    /// match the three-matrix gated block.
    pub fn relu_d_ff(&self) -> usize {
        3 * self.d_ff / 2
    }
}

/// One position in the computation order of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SublayerKind {
    SelfAttention,
    CrossAttention,
    DenseFfn,
    SparseFfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedSublayer {
    pub stack: StackId,
    pub layer: usize,
    pub kind: SublayerKind,
    /// FFN slot within the layer: 0 = primary, 1 = the extra dense block
    /// that follows a sparse layer when sparse_dense is set.
    pub ffn_slot: usize,
}

/// Expands the config into the exact sublayer sequence of both stacks.
pub fn layer_plan(config: &ModelConfig) -> Vec<PlannedSublayer> {
    let stride = config.sparse_stride();
    let mut plan = Vec::new();
    for stack in [StackId::Encoder, StackId::Decoder] {
        for layer in 0..config.num_layers {
            plan.push(PlannedSublayer {
                stack,
                layer,
                kind: SublayerKind::SelfAttention,
                ffn_slot: 0,
            });
            if stack == StackId::Decoder {
                plan.push(PlannedSublayer {
                    stack,
                    layer,
                    kind: SublayerKind::CrossAttention,
                    ffn_slot: 0,
                });
            }
            let sparse = (layer + 1) % stride == 0;
            if sparse {
                plan.push(PlannedSublayer {
                    stack,
                    layer,
                    kind: SublayerKind::SparseFfn,
                    ffn_slot: 0,
                });
                if config.sparse_dense {
                    plan.push(PlannedSublayer {
                        stack,
                        layer,
                        kind: SublayerKind::DenseFfn,
                        ffn_slot: 1,
                    });
                }
            } else {
                plan.push(PlannedSublayer {
                    stack,
                    layer,
                    kind: SublayerKind::DenseFfn,
                    ffn_slot: 0,
                });
            }
        }
    }
    plan
}

/// Parameter taxonomy used for trainable-subset masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Attention,
    DenseFfn,
    ExpertFfn,
    Router,
    Norm,
    OutputProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// The model's parameters in a fixed, seed-independent order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor) {
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, kind, tensor });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Standard normal via Box-Muller; resampled until |z| <= 2.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (0.1 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| truncated_normal(rng, std)).collect()).unwrap()
}

/// Materializes parameters for `config`, drawing from a generator seeded
/// with `seed`. Matrix weights are truncated normal with variance
/// 0.1/fan_in; norm gains start at 1; expert biases start at their
/// identity value (0 additive, 1 multiplicative).
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Params, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::default();
    let d = config.d_model;
    let att = config.num_heads * config.d_kv;

    params.push(
        "embed.tokens".into(),
        ParamKind::Embedding,
        init_weight(&mut rng, &[config.vocab_size, d], d),
    );
    params.push(
        "embed.pos.enc".into(),
        ParamKind::Embedding,
        init_weight(&mut rng, &[config.enc_len, d], d),
    );
    params.push(
        "embed.pos.dec".into(),
        ParamKind::Embedding,
        init_weight(&mut rng, &[config.dec_len, d], d),
    );

    for sub in layer_plan(config) {
        let prefix = sublayer_prefix(&sub);
        if config.rms_scale {
            params.push(
                format!("{prefix}.norm"),
                ParamKind::Norm,
                Tensor::full(&[1, d], 1.0),
            );
        }
        match sub.kind {
            SublayerKind::SelfAttention | SublayerKind::CrossAttention => {
                for w in ["wq", "wk", "wv"] {
                    params.push(
                        format!("{prefix}.{w}"),
                        ParamKind::Attention,
                        init_weight(&mut rng, &[d, att], d),
                    );
                }
                params.push(
                    format!("{prefix}.wo"),
                    ParamKind::Attention,
                    init_weight(&mut rng, &[att, d], att),
                );
            }
            SublayerKind::DenseFfn => match config.ffn {
                FfnKind::Geglu => {
                    for w in ["w11", "w12"] {
                        params.push(
                            format!("{prefix}.{w}"),
                            ParamKind::DenseFfn,
                            init_weight(&mut rng, &[d, config.d_ff], d),
                        );
                    }
                    params.push(
                        format!("{prefix}.w2"),
                        ParamKind::DenseFfn,
                        init_weight(&mut rng, &[config.d_ff, d], config.d_ff),
                    );
                }
                FfnKind::Relu => {
                    let ff = config.relu_d_ff();
                    params.push(
                        format!("{prefix}.w1"),
                        ParamKind::DenseFfn,
                        init_weight(&mut rng, &[d, ff], d),
                    );
                    params.push(
                        format!("{prefix}.w2"),
                        ParamKind::DenseFfn,
                        init_weight(&mut rng, &[ff, d], ff),
                    );
                }
            },
            SublayerKind::SparseFfn => {
                params.push(
                    format!("{prefix}.router"),
                    ParamKind::Router,
                    init_weight(&mut rng, &[d, config.router.num_experts], d),
                );
                for e in 0..config.router.num_experts {
                    match config.ffn {
                        FfnKind::Geglu => {
                            for w in ["w11", "w12"] {
                                params.push(
                                    format!("{prefix}.e{e}.{w}"),
                                    ParamKind::ExpertFfn,
                                    init_weight(&mut rng, &[d, config.d_ff], d),
                                );
                            }
                            params.push(
                                format!("{prefix}.e{e}.w2"),
                                ParamKind::ExpertFfn,
                                init_weight(&mut rng, &[config.d_ff, d], config.d_ff),
                            );
                            match config.bias_mode {
                                BiasMode::None => {}
                                BiasMode::Additive => params.push(
                                    format!("{prefix}.e{e}.bias"),
                                    ParamKind::ExpertFfn,
                                    Tensor::zeros(&[1, config.d_ff]),
                                ),
                                BiasMode::Multiplicative => params.push(
                                    format!("{prefix}.e{e}.bias"),
                                    ParamKind::ExpertFfn,
                                    Tensor::full(&[1, config.d_ff], 1.0),
                                ),
                            }
                        }
                        FfnKind::Relu => {
                            let ff = config.relu_d_ff();
                            params.push(
                                format!("{prefix}.e{e}.w1"),
                                ParamKind::ExpertFfn,
                                init_weight(&mut rng, &[d, ff], d),
                            );
                            params.push(
                                format!("{prefix}.e{e}.w2"),
                                ParamKind::ExpertFfn,
                                init_weight(&mut rng, &[ff, d], ff),
                            );
                        }
                    }
                }
            }
        }
    }

    for stack in [StackId::Encoder, StackId::Decoder] {
        if config.rms_scale {
            params.push(
                format!("{}.final_norm", stack.short()),
                ParamKind::Norm,
                Tensor::full(&[1, d], 1.0),
            );
        }
    }
    params.push(
        "out.proj".into(),
        ParamKind::OutputProjection,
        init_weight(&mut rng, &[d, config.vocab_size], d),
    );
    Ok(params)
}

fn sublayer_prefix(sub: &PlannedSublayer) -> String {
    let stack = sub.stack.short();
    let layer = sub.layer;
    match sub.kind {
        SublayerKind::SelfAttention => format!("{stack}.{layer}.attn"),
        SublayerKind::CrossAttention => format!("{stack}.{layer}.xattn"),
        SublayerKind::DenseFfn => format!("{stack}.{layer}.ffn{}", sub.ffn_slot),
        SublayerKind::SparseFfn => format!("{stack}.{layer}.moe"),
    }
}

/// One batch: encoder token ids and decoder target ids, both unpadded.
/// The forward pass pads/truncates to enc_len/dec_len; decoder inputs
/// are the targets shifted right behind a BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct EncDecBatch {
    pub enc_ids: Vec<Vec<usize>>,
    pub dec_targets: Vec<Vec<usize>>,
}

impl EncDecBatch {
    pub fn len(&self) -> usize {
        self.enc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc_ids.is_empty()
    }
}

/// Everything observed at one expert layer for one routing group.
#[derive(Debug, Clone)]
pub struct MoeEvent {
    pub stack: StackId,
    pub layer: usize,
    pub example: usize,
    /// Position (within the sequence) of the group's first token.
    pub group_start: usize,
    pub token_ids: Vec<usize>,
    pub decision: RoutingDecision,
    pub probs: Tensor,
    pub logits: Tensor,
}

/// A recorded forward pass: the tape, handles for the losses, and the
/// off-tape observations reports are built from.
pub struct ForwardPass {
    pub graph: Graph,
    /// Parallel to `Params::entries`.
    pub param_vars: Vec<Var>,
    pub total: Var,
    pub ce: Var,
    pub lb: Var,
    pub z: Var,
    pub ce_value: f64,
    pub lb_value: f64,
    pub z_value: f64,
    pub total_value: f64,
    pub target_token_count: usize,
    /// Final decoder logits per example (dec_len x vocab), for accuracy
    /// and perplexity bookkeeping outside the tape.
    pub per_example_logits: Vec<Tensor>,
    pub moe_events: Vec<MoeEvent>,
    pub max_abs_router_logit: f64,
}

impl std::fmt::Debug for ForwardPass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardPass")
            .field("total", &self.total_value)
            .field("ce", &self.ce_value)
            .field("lb", &self.lb_value)
            .field("z", &self.z_value)
            .field("target_token_count", &self.target_token_count)
            .field("moe_events", &self.moe_events.len())
            .field("tape_nodes", &self.graph.len())
            .finish()
    }
}

impl ForwardPass {
    pub fn gradients(&self) -> Vec<Tensor> {
        self.graph
            .gradients_of(self.total, &self.param_vars)
            .expect("total loss is scalar by construction")
    }

    /// Dropped candidates / total candidates across all expert layers.
    pub fn drop_fraction(&self) -> f64 {
        let total: usize = self.moe_events.iter().map(|e| e.decision.candidate_count()).sum();
        let dropped: usize = self.moe_events.iter().map(|e| e.decision.dropped_count()).sum();
        if total == 0 {
            0.0
        } else {
            dropped as f64 / total as f64
        }
    }
}

/// Tape handles for one expert's feed-forward weights.
#[derive(Debug, Clone, Copy)]
pub enum ExpertVars {
    Geglu {
        w11: Var,
        w12: Var,
        w2: Var,
        bias: Option<Var>,
    },
    Relu {
        w1: Var,
        w2: Var,
    },
}

/// Result of recording one expert layer for one group on the tape.
pub struct MoeTapeOutput {
    /// Combined expert outputs, zero rows where every candidate dropped.
    pub combined: Var,
    pub logits: Var,
    pub probs: Var,
    /// Probability values the routing decision was made from; differs
    /// from the tape values only under emulated router precision.
    pub probs_used: Tensor,
    pub logits_value: Tensor,
    pub decision: RoutingDecision,
}

/// Inverted-scale dropout recorded as a constant mask; identity outside
/// training or at rate zero.
fn tape_dropout(g: &mut Graph, x: Var, rate: f64, phase: Phase, rng: &mut ChaCha8Rng) -> Var {
    if phase != Phase::Train || rate <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.var(Tensor::new(&shape, mask).unwrap());
    g.mul(x, m)
}

fn expert_ffn_on_tape(
    g: &mut Graph,
    x: Var,
    weights: &ExpertVars,
    bias_mode: BiasMode,
    expert_dropout: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Var {
    match *weights {
        ExpertVars::Geglu { w11, w12, w2, bias } => {
            let a = g.matmul(x, w11);
            let gated = g.gelu(a);
            let b = g.matmul(x, w12);
            let mut h = g.mul(gated, b);
            match (bias_mode, bias) {
                (BiasMode::None, _) | (_, None) => {}
                (BiasMode::Additive, Some(bv)) => h = g.add_row_vec(h, bv),
                (BiasMode::Multiplicative, Some(bv)) => h = g.mul_row_vec(h, bv),
            }
            let h = tape_dropout(g, h, expert_dropout, phase, rng);
            g.matmul(h, w2)
        }
        ExpertVars::Relu { w1, w2 } => {
            let a = g.matmul(x, w1);
            let h0 = g.relu(a);
            let h = tape_dropout(g, h0, expert_dropout, phase, rng);
            g.matmul(h, w2)
        }
    }
}

/// Records a full expert layer over one group of tokens.
///
/// The routing decision is made from probability values off the tape;
/// combine gates are gathered back out of the on-tape softmax so the
/// router is trained through them. The differentiable gate denominator
/// for top-n >= 2 reuses the selector's expert ranking, keeping the
/// gradient path and the dispatch decision consistent with each other.
pub fn moe_group_on_tape(
    g: &mut Graph,
    x: Var,
    router: Var,
    experts: &[ExpertVars],
    rc: &RouterConfig,
    bias_mode: BiasMode,
    expert_dropout: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<MoeTapeOutput, ModelError> {
    assert_eq!(experts.len(), rc.num_experts, "expert weights vs config");
    let (t, d) = g.value(x).require_matrix().expect("moe input not a matrix");

    // Router input jitter: a recorded constant, so the perturbation
    // itself is not differentiated.
    let routed_in = if phase == Phase::Train && rc.jitter_eps > 0.0 {
        let noise: Vec<f64> = (0..t * d)
            .map(|_| rng.gen_range(1.0 - rc.jitter_eps..1.0 + rc.jitter_eps))
            .collect();
        let nv = g.var(Tensor::new(&[t, d], noise).unwrap());
        g.mul(x, nv)
    } else {
        x
    };
    let logits = g.matmul(routed_in, router);
    let probs = g.softmax_rows(logits);

    let logits_value = g.value(logits).clone();
    let probs_used = match rc.router_precision {
        routing::RouterPrecision::Float64 => g.value(probs).clone(),
        routing::RouterPrecision::Emulated32 => {
            // Decisions mimic a 32-bit router; the tape keeps the wide
            // softmax for gradients.
            let mut p = Tensor::zeros(&[t, rc.num_experts]);
            for i in 0..t {
                let row = crate::precision::softmax_in_format(
                    logits_value.row(i).unwrap(),
                    crate::precision::FloatFormat::float32(),
                );
                for (j, v) in row.into_iter().enumerate() {
                    p.set2(i, j, v);
                }
            }
            p
        }
    };

    let candidates = routing::select_top_n(&probs_used, rc, phase, rng)?;
    let capacity = routing::expert_capacity(t, rc.num_experts, rc.capacity_factor(phase));
    let decision = routing::assign_capacity(&candidates, rc.num_experts, capacity, rc.drop_policy);

    // Differentiable gate denominators: the sum of the full top-n
    // probabilities per token, derived from the same ranking the
    // selector used.
    let denom = if rc.top_n >= 2 {
        let sets = routing::top_n_sets(&probs_used, rc.top_n)?;
        let mut acc: Option<Var> = None;
        for rank in 0..rc.top_n {
            let pairs: Vec<(usize, usize)> =
                sets.iter().enumerate().map(|(i, s)| (i, s[rank])).collect();
            let picked = g.gather_elems(probs, pairs);
            acc = Some(match acc {
                None => picked,
                Some(a) => g.add(a, picked),
            });
        }
        acc
    } else {
        None
    };

    let mut combined = g.var(Tensor::zeros(&[t, d]));
    for (e, weights) in experts.iter().enumerate() {
        // Kept assignments of expert e in slot order.
        let mut kept: Vec<(usize, usize)> = Vec::new(); // (slot, token)
        for (token, assigns) in decision.assignments.iter().enumerate() {
            for a in assigns {
                if a.expert == e && a.kept {
                    kept.push((a.slot.unwrap(), token));
                }
            }
        }
        kept.sort_unstable();
        if kept.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = kept.iter().map(|&(_, tok)| tok).collect();
        let gather_idx: Vec<Option<usize>> = tokens.iter().map(|&tok| Some(tok)).collect();
        let x_e = g.gather_rows(x, gather_idx.clone());
        let y_e = expert_ffn_on_tape(g, x_e, weights, bias_mode, expert_dropout, phase, rng);

        let scaled = if rc.top_n == 1 && rc.top1_gate == routing::Top1Gate::Unit {
            y_e
        } else {
            let pairs: Vec<(usize, usize)> = tokens.iter().map(|&tok| (tok, e)).collect();
            let raw = g.gather_elems(probs, pairs);
            let gates = match denom {
                Some(dn) => {
                    let d_rows = g.gather_rows(dn, gather_idx);
                    g.div(raw, d_rows)
                }
                None => raw,
            };
            g.scale_rows(y_e, gates)
        };
        let spread = g.scatter_add_rows(scaled, tokens, t);
        combined = g.add(combined, spread);
    }

    Ok(MoeTapeOutput {
        combined,
        logits,
        probs,
        probs_used,
        logits_value,
        decision,
    })
}

struct Ctx<'a> {
    g: Graph,
    config: &'a ModelConfig,
    params: &'a Params,
    vars: Vec<Var>,
    phase: Phase,
    rng: ChaCha8Rng,
    lb_nodes: Vec<Var>,
    z_nodes: Vec<Var>,
    moe_events: Vec<MoeEvent>,
    max_abs_router_logit: f64,
}

impl<'a> Ctx<'a> {
    fn var_of(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam { name: name.into() })
    }

    fn maybe_dropout(&mut self, x: Var, rate: f64) -> Var {
        tape_dropout(&mut self.g, x, rate, self.phase, &mut self.rng)
    }

    fn normed(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        if self.config.rms_scale {
            let gain = self.var_of(&format!("{prefix}.norm"))?;
            Ok(self.g.rms_norm_rows(x, Some(gain)))
        } else {
            Ok(self.g.rms_norm_rows(x, None))
        }
    }

    /// rms_norm -> layer -> dropout -> residual add.
    fn residual(&mut self, x: Var, layer_out: Var) -> Var {
        let dropped = self.maybe_dropout(layer_out, self.config.dropout);
        self.g.add(x, dropped)
    }

    fn attention(
        &mut self,
        prefix: &str,
        queries: Var,
        keys_values: Var,
        mask: &Tensor,
    ) -> Result<Var, ModelError> {
        let wq = self.var_of(&format!("{prefix}.wq"))?;
        let wk = self.var_of(&format!("{prefix}.wk"))?;
        let wv = self.var_of(&format!("{prefix}.wv"))?;
        let wo = self.var_of(&format!("{prefix}.wo"))?;
        let q_all = self.g.matmul(queries, wq);
        let k_all = self.g.matmul(keys_values, wk);
        let v_all = self.g.matmul(keys_values, wv);
        let mask_var = self.g.var(mask.clone());
        let scale = 1.0 / (self.config.d_kv as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let off = h * self.config.d_kv;
            let q = self.g.slice_cols(q_all, off, self.config.d_kv);
            let k = self.g.slice_cols(k_all, off, self.config.d_kv);
            let v = self.g.slice_cols(v_all, off, self.config.d_kv);
            let kt = self.g.transpose(k);
            let scores = self.g.matmul(q, kt);
            let scaled = self.g.scale(scores, scale);
            let masked = self.g.add(scaled, mask_var);
            let probs = self.g.softmax_rows(masked);
            heads.push(self.g.matmul(probs, v));
        }
        let cat = self.g.concat_cols(&heads);
        Ok(self.g.matmul(cat, wo))
    }

    fn dense_ffn(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        match self.config.ffn {
            FfnKind::Geglu => {
                let w11 = self.var_of(&format!("{prefix}.w11"))?;
                let w12 = self.var_of(&format!("{prefix}.w12"))?;
                let w2 = self.var_of(&format!("{prefix}.w2"))?;
                let a = self.g.matmul(x, w11);
                let gated = self.g.gelu(a);
                let b = self.g.matmul(x, w12);
                let h = self.g.mul(gated, b);
                Ok(self.g.matmul(h, w2))
            }
            FfnKind::Relu => {
                let w1 = self.var_of(&format!("{prefix}.w1"))?;
                let w2 = self.var_of(&format!("{prefix}.w2"))?;
                let a = self.g.matmul(x, w1);
                let h = self.g.relu(a);
                Ok(self.g.matmul(h, w2))
            }
        }
    }

    fn expert_vars(&self, prefix: &str, e: usize) -> Result<ExpertVars, ModelError> {
        Ok(match self.config.ffn {
            FfnKind::Geglu => ExpertVars::Geglu {
                w11: self.var_of(&format!("{prefix}.e{e}.w11"))?,
                w12: self.var_of(&format!("{prefix}.e{e}.w12"))?,
                w2: self.var_of(&format!("{prefix}.e{e}.w2"))?,
                bias: match self.config.bias_mode {
                    BiasMode::None => None,
                    _ => Some(self.var_of(&format!("{prefix}.e{e}.bias"))?),
                },
            },
            FfnKind::Relu => ExpertVars::Relu {
                w1: self.var_of(&format!("{prefix}.e{e}.w1"))?,
                w2: self.var_of(&format!("{prefix}.e{e}.w2"))?,
            },
        })
    }

    /// Full expert layer over one routing group. Returns the combined
    /// output (zero rows for dropped tokens; the caller's residual path
    /// carries them).
    fn moe_group(
        &mut self,
        prefix: &str,
        x: Var,
        stack: StackId,
        layer: usize,
        example: usize,
        group_start: usize,
        token_ids: &[usize],
    ) -> Result<Var, ModelError> {
        let router = self.var_of(&format!("{prefix}.router"))?;
        let experts: Vec<ExpertVars> = (0..self.config.router.num_experts)
            .map(|e| self.expert_vars(prefix, e))
            .collect::<Result<_, _>>()?;
        let out = moe_group_on_tape(
            &mut self.g,
            x,
            router,
            &experts,
            &self.config.router,
            self.config.bias_mode,
            self.config.expert_dropout,
            self.phase,
            &mut self.rng,
        )?;

        for &v in out.logits_value.data() {
            self.max_abs_router_logit = self.max_abs_router_logit.max(v.abs());
        }
        let lb = losses::load_balance_node(&mut self.g, out.probs, 1.0);
        let z = losses::router_z_node(&mut self.g, out.logits);
        self.lb_nodes.push(lb);
        self.z_nodes.push(z);
        self.moe_events.push(MoeEvent {
            stack,
            layer,
            example,
            group_start,
            token_ids: token_ids.to_vec(),
            decision: out.decision,
            probs: out.probs_used,
            logits: out.logits_value,
        });
        Ok(out.combined)
    }

    /// Runs one stack over one example's padded ids.
    fn run_stack(
        &mut self,
        stack: StackId,
        example: usize,
        ids: &[usize],
        self_mask: &Tensor,
        cross: Option<(Var, &Tensor)>,
    ) -> Result<Var, ModelError> {
        let tokens = self.var_of("embed.tokens")?;
        let pos = self.var_of(&format!("embed.pos.{}", stack.short()))?;
        let tok_rows = self.g.gather_rows(tokens, ids.iter().map(|&i| Some(i)).collect());
        let pos_rows = self.g.gather_rows(pos, (0..ids.len()).map(Some).collect());
        let mut x = self.g.add(tok_rows, pos_rows);
        x = self.maybe_dropout(x, self.config.dropout);

        for sub in layer_plan(self.config) {
            if sub.stack != stack {
                continue;
            }
            let prefix = sublayer_prefix(&sub);
            let normed = self.normed(x, &prefix)?;
            let out = match sub.kind {
                SublayerKind::SelfAttention => self.attention(&prefix, normed, normed, self_mask)?,
                SublayerKind::CrossAttention => {
                    let (enc_out, cross_mask) = cross.expect("decoder needs encoder output");
                    self.attention(&prefix, normed, enc_out, cross_mask)?
                }
                SublayerKind::DenseFfn => self.dense_ffn(&prefix, normed)?,
                SublayerKind::SparseFfn => {
                    let gs = self.config.router.group_size.min(ids.len());
                    let mut parts: Vec<Var> = Vec::new();
                    let mut starts: Vec<usize> = Vec::new();
                    let mut start = 0;
                    while start < ids.len() {
                        let len = gs.min(ids.len() - start);
                        let idx: Vec<Option<usize>> = (start..start + len).map(Some).collect();
                        let xg = self.g.gather_rows(normed, idx);
                        let yg = self.moe_group(
                            &prefix,
                            xg,
                            stack,
                            sub.layer,
                            example,
                            start,
                            &ids[start..start + len],
                        )?;
                        parts.push(yg);
                        starts.push(start);
                        start += len;
                    }
                    // Reassemble groups into sequence order.
                    let mut acc = self.g.var(Tensor::zeros(&[ids.len(), self.config.d_model]));
                    for (part, s) in parts.into_iter().zip(starts) {
                        let rows = self.g.value(part).rows().unwrap();
                        let idx: Vec<usize> = (s..s + rows).collect();
                        let spread = self.g.scatter_add_rows(part, idx, ids.len());
                        acc = self.g.add(acc, spread);
                    }
                    acc
                }
            };
            x = self.residual(x, out);
        }
        let final_prefix = format!("{}.final", stack.short());
        let x = if self.config.rms_scale {
            let gain = self.var_of(&format!("{final_prefix}_norm"))?;
            self.g.rms_norm_rows(x, Some(gain))
        } else {
            self.g.rms_norm_rows(x, None)
        };
        Ok(x)
    }
}

fn pad_to(ids: &[usize], len: usize) -> Vec<usize> {
    let mut out = ids.to_vec();
    out.truncate(len);
    out.resize(len, PAD_ID);
    out
}

fn self_attention_mask(ids: &[usize], causal: bool) -> Tensor {
    let n = ids.len();
    let mut m = Tensor::zeros(&[n, n]);
    for q in 0..n {
        for k in 0..n {
            let pad = ids[k] == PAD_ID;
            let future = causal && k > q;
            if pad || future {
                m.set2(q, k, MASK_NEG);
            }
        }
    }
    m
}

fn cross_attention_mask(dec_len: usize, enc_ids: &[usize]) -> Tensor {
    let mut m = Tensor::zeros(&[dec_len, enc_ids.len()]);
    for q in 0..dec_len {
        for (k, &id) in enc_ids.iter().enumerate() {
            if id == PAD_ID {
                m.set2(q, k, MASK_NEG);
            }
        }
    }
    m
}

/// Records a full forward pass of the batch and composes the total loss.
///
/// Cross-entropy averages over real (non-padding) target tokens across
/// the whole batch; the auxiliary losses average over every
/// (expert layer, group) pair. The same `seed`-derived generator drives
/// dropout, jitter, and threshold sampling, so a (params, batch, seed)
/// triple fully determines the result.
pub fn forward_batch(
    config: &ModelConfig,
    params: &Params,
    batch: &EncDecBatch,
    phase: Phase,
    loss_config: &LossConfig,
    seed: u64,
) -> Result<ForwardPass, ModelError> {
    config.validate()?;
    assert_eq!(batch.enc_ids.len(), batch.dec_targets.len(), "ragged batch");
    for ids in batch.enc_ids.iter().chain(batch.dec_targets.iter()) {
        for &id in ids {
            if id >= config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
    }

    let mut ctx = Ctx {
        g: Graph::new(),
        config,
        params,
        vars: Vec::with_capacity(params.len()),
        phase,
        rng: ChaCha8Rng::seed_from_u64(seed),
        lb_nodes: Vec::new(),
        z_nodes: Vec::new(),
        moe_events: Vec::new(),
        max_abs_router_logit: 0.0,
    };
    for entry in params.entries() {
        let v = ctx.g.var(entry.tensor.clone());
        ctx.vars.push(v);
    }

    let out_proj = ctx.var_of("out.proj")?;
    let mut nll_sum: Option<Var> = None;
    let mut target_token_count = 0usize;
    let mut per_example_logits = Vec::with_capacity(batch.len());

    for ex in 0..batch.len() {
        let enc_ids = pad_to(&batch.enc_ids[ex], config.enc_len);
        let targets = {
            let mut t = batch.dec_targets[ex].clone();
            t.truncate(config.dec_len);
            t
        };
        let mut dec_in = vec![BOS_ID];
        dec_in.extend(targets.iter().take(config.dec_len - 1).copied());
        let dec_in = pad_to(&dec_in, config.dec_len);

        let enc_mask = self_attention_mask(&enc_ids, false);
        let enc_out = ctx.run_stack(StackId::Encoder, ex, &enc_ids, &enc_mask, None)?;

        let dec_mask = self_attention_mask(&dec_in, true);
        let cross_mask = cross_attention_mask(config.dec_len, &enc_ids);
        let dec_out = ctx.run_stack(
            StackId::Decoder,
            ex,
            &dec_in,
            &dec_mask,
            Some((enc_out, &cross_mask)),
        )?;

        let logits = ctx.g.matmul(dec_out, out_proj);
        per_example_logits.push(ctx.g.value(logits).clone());
        if !targets.is_empty() {
            let logp = ctx.g.log_softmax_rows(logits);
            let picks: Vec<(usize, usize)> =
                targets.iter().enumerate().map(|(pos, &t)| (pos, t)).collect();
            target_token_count += picks.len();
            let picked = ctx.g.gather_elems(logp, picks);
            let s = ctx.g.sum_all(picked);
            nll_sum = Some(match nll_sum {
                None => s,
                Some(acc) => ctx.g.add(acc, s),
            });
        }
    }

    let nll_sum = nll_sum.ok_or(ModelError::EmptyTargets)?;
    let ce = ctx.g.scale(nll_sum, -1.0 / target_token_count as f64);

    let mean_of = |nodes: &[Var], g: &mut Graph| -> Var {
        if nodes.is_empty() {
            return g.var(Tensor::scalar(0.0));
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = g.add(acc, n);
        }
        g.scale(acc, 1.0 / nodes.len() as f64)
    };
    let lb_nodes = ctx.lb_nodes.clone();
    let z_nodes = ctx.z_nodes.clone();
    let lb = mean_of(&lb_nodes, &mut ctx.g);
    let z = mean_of(&z_nodes, &mut ctx.g);
    let total = losses::total_loss_node(&mut ctx.g, ce, lb, z, loss_config);

    let ce_value = ctx.g.value(ce).scalar_value().unwrap();
    let lb_value = ctx.g.value(lb).scalar_value().unwrap();
    let z_value = ctx.g.value(z).scalar_value().unwrap();
    let total_value = ctx.g.value(total).scalar_value().unwrap();

    Ok(ForwardPass {
        graph: ctx.g,
        param_vars: ctx.vars,
        total,
        ce,
        lb,
        z,
        ce_value,
        lb_value,
        z_value,
        total_value,
        target_token_count,
        per_example_logits,
        moe_events: ctx.moe_events,
        max_abs_router_logit: ctx.max_abs_router_logit,
    })
}

/// Per-token matmul FLOPs (2 per multiply-add), split by where the work
/// happens. Expert work counts the per-token compute actually purchased:
/// top_n feed-forward passes, however many experts exist; it is
/// independent of num_experts by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopReport {
    pub encoder_attention: f64,
    pub decoder_attention: f64,
    pub encoder_dense_ffn: f64,
    pub decoder_dense_ffn: f64,
    pub encoder_expert_ffn: f64,
    pub decoder_expert_ffn: f64,
    pub encoder_router: f64,
    pub decoder_router: f64,
    pub output_projection: f64,
}

impl FlopReport {
    /// Total per-example FLOPs given the configured sequence lengths.
    pub fn per_example(&self, enc_len: usize, dec_len: usize) -> f64 {
        let enc = self.encoder_attention + self.encoder_dense_ffn + self.encoder_expert_ffn
            + self.encoder_router;
        let dec = self.decoder_attention + self.decoder_dense_ffn + self.decoder_expert_ffn
            + self.decoder_router
            + self.output_projection;
        enc * enc_len as f64 + dec * dec_len as f64
    }

    pub fn expert_total(&self) -> f64 {
        self.encoder_expert_ffn + self.decoder_expert_ffn
    }
}

/// Scalar parameter count, computed from the layer plan without
/// materializing weights. Agrees with `build_model` by construction;
/// a test pins the two together.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let att = config.num_heads * config.d_kv;
    let ffn_params = match config.ffn {
        FfnKind::Geglu => 3 * d * config.d_ff,
        FfnKind::Relu => 2 * d * config.relu_d_ff(),
    };
    let bias_params = match (config.ffn, config.bias_mode) {
        (FfnKind::Geglu, BiasMode::Additive | BiasMode::Multiplicative) => config.d_ff,
        _ => 0,
    };
    let mut n = config.vocab_size * d + (config.enc_len + config.dec_len) * d;
    for sub in layer_plan(config) {
        if config.rms_scale {
            n += d;
        }
        n += match sub.kind {
            SublayerKind::SelfAttention | SublayerKind::CrossAttention => 3 * d * att + att * d,
            SublayerKind::DenseFfn => ffn_params,
            SublayerKind::SparseFfn => {
                d * config.router.num_experts
                    + config.router.num_experts * (ffn_params + bias_params)
            }
        };
    }
    if config.rms_scale {
        n += 2 * d;
    }
    n + d * config.vocab_size
}

/// Counts per-token matmul FLOPs from the layer plan.
pub fn flop_report(config: &ModelConfig) -> FlopReport {
    let d = config.d_model as f64;
    let att = (config.num_heads * config.d_kv) as f64;
    let ff = config.d_ff as f64;
    let ffn_flops = match config.ffn {
        FfnKind::Geglu => 6.0 * d * ff,
        FfnKind::Relu => 4.0 * d * config.relu_d_ff() as f64,
    };
    let attn = |kv_len: usize| 8.0 * d * att + 4.0 * att * kv_len as f64;

    let mut r = FlopReport {
        encoder_attention: 0.0,
        decoder_attention: 0.0,
        encoder_dense_ffn: 0.0,
        decoder_dense_ffn: 0.0,
        encoder_expert_ffn: 0.0,
        decoder_expert_ffn: 0.0,
        encoder_router: 0.0,
        decoder_router: 0.0,
        output_projection: 2.0 * d * config.vocab_size as f64,
    };
    for sub in layer_plan(config) {
        let enc = sub.stack == StackId::Encoder;
        match sub.kind {
            SublayerKind::SelfAttention => {
                let f = attn(if enc { config.enc_len } else { config.dec_len });
                if enc {
                    r.encoder_attention += f;
                } else {
                    r.decoder_attention += f;
                }
            }
            SublayerKind::CrossAttention => {
                r.decoder_attention += attn(config.enc_len);
            }
            SublayerKind::DenseFfn => {
                if enc {
                    r.encoder_dense_ffn += ffn_flops;
                } else {
                    r.decoder_dense_ffn += ffn_flops;
                }
            }
            SublayerKind::SparseFfn => {
                let expert = config.router.top_n as f64 * ffn_flops;
                let router = 2.0 * d * config.router.num_experts as f64;
                if enc {
                    r.encoder_expert_ffn += expert;
                    r.encoder_router += router;
                } else {
                    r.decoder_expert_ffn += expert;
                    r.decoder_router += router;
                }
            }
        }
    }
    r
}
