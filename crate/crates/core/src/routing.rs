//! Token-to-expert routing: gate computation, top-n selection with
//! threshold sampling, capacity assignment, and dispatch/combine.
//!
//! Routing is factored into pure stages so each one can be checked
//! against a brute-force oracle:
//!
//!   gates -> candidates -> capacity assignment -> dispatch -> combine
//!
//! Tokens are routed within fixed-size groups; capacity is a function of
//! the group size, so group boundaries are load-balancing boundaries.
//! A dropped token contributes nothing here; the model's residual
//! connection is what carries it forward unchanged.

use crate::ops;
use crate::precision::{softmax_in_format, FloatFormat};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Train enables stochastic behavior (jitter, threshold sampling);
/// eval is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// What happens when more tokens want an expert than it has capacity for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    /// Tokens claim slots in position order; later tokens overflow.
    LeftToRight,
    /// Each expert keeps its highest-gate candidates regardless of
    /// position. Peeks at the whole group, so it is valid only where
    /// tokens may see each other (encoder side).
    BatchPrioritized,
}

impl Default for DropPolicy {
    fn default() -> Self {
        DropPolicy::LeftToRight
    }
}

/// Numeric format for the gate softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPrecision {
    Float64,
    /// Every softmax intermediate rounded to IEEE binary32.
    Emulated32,
}

impl Default for RouterPrecision {
    fn default() -> Self {
        RouterPrecision::Float64
    }
}

/// Combine gate for top-1 routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Top1Gate {
    /// Scale expert output by the raw router probability.
    RawProb,
    /// Pass expert output through unscaled. No gradient flows to the
    /// router through the combine in this mode.
    Unit,
}

impl Default for Top1Gate {
    fn default() -> Self {
        Top1Gate::RawProb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub num_experts: usize,
    /// Experts consulted per token. Rank 1 is always dispatched; lower
    /// ranks go through threshold sampling during training.
    pub top_n: usize,
    pub train_capacity_factor: f64,
    pub eval_capacity_factor: f64,
    /// Threshold for sampling ranks 2..n: keep with probability
    /// min(1, gate / threshold).
    pub threshold: f64,
    /// Tokens per routing group; capacity and load stats are per group.
    pub group_size: usize,
    /// Multiplicative input jitter half-width; 0 disables.
    pub jitter_eps: f64,
    pub drop_policy: DropPolicy,
    pub router_precision: RouterPrecision,
    pub top1_gate: Top1Gate,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_n: 2,
            train_capacity_factor: 1.25,
            eval_capacity_factor: 2.0,
            threshold: 0.2,
            group_size: 8,
            jitter_eps: 1e-2,
            drop_policy: DropPolicy::default(),
            router_precision: RouterPrecision::default(),
            top1_gate: Top1Gate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoutingError {
    #[error("num_experts must be positive")]
    NoExperts,
    #[error("top_n {top_n} must be in 1..={num_experts}")]
    InvalidTopN { top_n: usize, num_experts: usize },
    #[error("threshold {0} must be in (0, 1]")]
    InvalidThreshold(f64),
    #[error("capacity factor {0} must be positive and finite")]
    InvalidCapacityFactor(f64),
    #[error("group_size must be positive")]
    ZeroGroupSize,
    #[error("jitter_eps {0} must be in [0, 1)")]
    InvalidJitter(f64),
    #[error("batch of {batch} rows does not divide into groups of {group_size}")]
    GroupMismatch { batch: usize, group_size: usize },
    #[error("expected {expected} expert output buffers, got {got}")]
    ExpertBufferCount { expected: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Numerics(#[from] ops::NumericsError),
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RoutingError> {
        if self.num_experts == 0 {
            return Err(RoutingError::NoExperts);
        }
        if self.top_n == 0 || self.top_n > self.num_experts {
            return Err(RoutingError::InvalidTopN {
                top_n: self.top_n,
                num_experts: self.num_experts,
            });
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(RoutingError::InvalidThreshold(self.threshold));
        }
        for cf in [self.train_capacity_factor, self.eval_capacity_factor] {
            if !(cf > 0.0 && cf.is_finite()) {
                return Err(RoutingError::InvalidCapacityFactor(cf));
            }
        }
        if self.group_size == 0 {
            return Err(RoutingError::ZeroGroupSize);
        }
        if !(0.0..1.0).contains(&self.jitter_eps) {
            return Err(RoutingError::InvalidJitter(self.jitter_eps));
        }
        Ok(())
    }

    pub fn capacity_factor(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Train => self.train_capacity_factor,
            Phase::Eval => self.eval_capacity_factor,
        }
    }
}

/// Per-expert slot budget for one group:
/// ceil(capacity_factor * group_size / num_experts), clamped to
/// [1, group_size]. The tiny slack keeps an exact integer product from
/// rounding up through float error.
pub fn expert_capacity(group_size: usize, num_experts: usize, capacity_factor: f64) -> usize {
    assert!(num_experts > 0 && group_size > 0, "empty routing problem");
    let raw = capacity_factor * group_size as f64 / num_experts as f64;
    let cap = (raw - 1e-9).ceil() as usize;
    cap.clamp(1, group_size)
}

/// One expert choice for one token, before capacity is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub expert: usize,
    /// Combine gate: raw or renormalized probability per config.
    pub gate: f64,
    /// 0 = the token's first choice.
    pub rank: usize,
}

/// A candidate after capacity assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub expert: usize,
    pub gate: f64,
    pub rank: usize,
    pub kept: bool,
    /// Capacity slot within the expert's buffer; `None` when dropped.
    pub slot: Option<usize>,
}

/// Capacity-resolved routing for one group of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    pub capacity: usize,
    /// Per token, in rank order.
    pub assignments: Vec<Vec<Assignment>>,
    /// Kept assignments per expert; always <= capacity.
    pub expert_load: Vec<usize>,
}

impl RoutingDecision {
    pub fn num_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn dropped_count(&self) -> usize {
        self.assignments
            .iter()
            .flat_map(|a| a.iter())
            .filter(|a| !a.kept)
            .count()
    }

    /// Dropped candidates / total candidates. Candidates declined by
    /// threshold sampling never existed, so they do not count.
    pub fn drop_fraction(&self) -> f64 {
        let total = self.candidate_count();
        if total == 0 {
            0.0
        } else {
            self.dropped_count() as f64 / total as f64
        }
    }
}

/// Applies multiplicative jitter, computes router logits, and turns them
/// into per-token gate distributions. Returns (logits, probabilities),
/// both tokens x experts. Jitter draws happen only in training with a
/// positive `jitter_eps`; the logits returned are the jittered ones so
/// downstream consumers see exactly what the softmax saw.
pub fn compute_gates(
    tokens: &Tensor,
    router_weights: &Tensor,
    jitter_eps: f64,
    phase: Phase,
    precision: RouterPrecision,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor), RoutingError> {
    let (_t, d) = tokens.require_matrix()?;
    let (dw, _n) = router_weights.require_matrix()?;
    if dw != d {
        return Err(RoutingError::Shape(TensorError::InnerDimMismatch {
            lhs: tokens.shape().to_vec(),
            rhs: router_weights.shape().to_vec(),
        }));
    }
    let routed_input = if phase == Phase::Train && jitter_eps > 0.0 {
        tokens.map(|v| v * rng.gen_range(1.0 - jitter_eps..1.0 + jitter_eps))
    } else {
        tokens.clone()
    };
    let logits = ops::matmul(&routed_input, router_weights)?;
    let (t, n) = logits.require_matrix()?;
    let mut probs = Tensor::zeros(&[t, n]);
    for i in 0..t {
        let row = logits.row(i)?;
        let p = match precision {
            RouterPrecision::Float64 => ops::softmax(row)?,
            RouterPrecision::Emulated32 => softmax_in_format(row, FloatFormat::float32()),
        };
        for (j, v) in p.into_iter().enumerate() {
            probs.set2(i, j, v);
        }
    }
    Ok((logits, probs))
}

/// Each token's experts ranked by descending probability, truncated to
/// the top n. Ties break toward the lower expert index. This ranking is
/// the single source of truth: candidate selection and the model's
/// differentiable gate denominators both derive from it.
pub fn top_n_sets(probs: &Tensor, top_n: usize) -> Result<Vec<Vec<usize>>, RoutingError> {
    let (t, n) = probs.require_matrix()?;
    if top_n == 0 || top_n > n {
        return Err(RoutingError::InvalidTopN {
            top_n,
            num_experts: n,
        });
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let row = probs.row(i)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        order.truncate(top_n);
        out.push(order);
    }
    Ok(out)
}

/// Picks each token's top-n experts and decides which of them become
/// dispatch candidates.
///
/// Gates: with top_n == 1 the gate is the raw probability or 1 per
/// `top1_gate`; with top_n >= 2 gates are renormalized over the top-n
/// set. The rank-1 expert is always a candidate. In training, rank r >= 2
/// survives with probability min(1, gate_r / threshold); in eval every
/// top-n expert is a candidate. Ties in probability break toward the
/// lower expert index.
pub fn select_top_n(
    probs: &Tensor,
    config: &RouterConfig,
    phase: Phase,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Candidate>>, RoutingError> {
    config.validate()?;
    let (t, n) = probs.require_matrix()?;
    if n != config.num_experts {
        return Err(RoutingError::Shape(TensorError::ShapeMismatch {
            lhs: vec![t, n],
            rhs: vec![t, config.num_experts],
        }));
    }
    let sets = top_n_sets(probs, config.top_n)?;
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let row = probs.row(i)?;
        let top = &sets[i];
        let denom: f64 = top.iter().map(|&e| row[e]).sum();
        let mut cands = Vec::with_capacity(config.top_n);
        for (rank, &expert) in top.iter().enumerate() {
            let gate = if config.top_n == 1 {
                match config.top1_gate {
                    Top1Gate::RawProb => row[expert],
                    Top1Gate::Unit => 1.0,
                }
            } else {
                row[expert] / denom
            };
            if rank == 0 {
                cands.push(Candidate { expert, gate, rank });
            } else {
                let keep = match phase {
                    Phase::Train => rng.gen::<f64>() < (gate / config.threshold).min(1.0),
                    Phase::Eval => true,
                };
                if keep {
                    cands.push(Candidate { expert, gate, rank });
                }
            }
        }
        out.push(cands);
    }
    Ok(out)
}

/// Resolves candidates against per-expert capacity.
pub fn assign_capacity(
    candidates: &[Vec<Candidate>],
    num_experts: usize,
    capacity: usize,
    policy: DropPolicy,
) -> RoutingDecision {
    let mut assignments: Vec<Vec<Assignment>> = candidates
        .iter()
        .map(|cands| {
            cands
                .iter()
                .map(|c| Assignment {
                    expert: c.expert,
                    gate: c.gate,
                    rank: c.rank,
                    kept: false,
                    slot: None,
                })
                .collect()
        })
        .collect();
    let mut load = vec![0usize; num_experts];

    match policy {
        DropPolicy::LeftToRight => {
            for token_assignments in assignments.iter_mut() {
                for a in token_assignments.iter_mut() {
                    if load[a.expert] < capacity {
                        a.kept = true;
                        a.slot = Some(load[a.expert]);
                        load[a.expert] += 1;
                    }
                }
            }
        }
        DropPolicy::BatchPrioritized => {
            // Per expert, keep the capacity-many highest-gate candidates;
            // ties prefer the earlier token, then the better rank.
            for expert in 0..num_experts {
                let mut wanting: Vec<(usize, usize, f64)> = Vec::new();
                for (t, cands) in candidates.iter().enumerate() {
                    for (ci, c) in cands.iter().enumerate() {
                        if c.expert == expert {
                            wanting.push((t, ci, c.gate));
                        }
                    }
                }
                wanting.sort_by(|a, b| {
                    b.2.partial_cmp(&a.2)
                        .unwrap()
                        .then(a.0.cmp(&b.0))
                        .then(a.1.cmp(&b.1))
                });
                for (slot, &(t, ci, _)) in wanting.iter().take(capacity).enumerate() {
                    assignments[t][ci].kept = true;
                    assignments[t][ci].slot = Some(slot);
                    load[expert] += 1;
                }
            }
        }
    }

    RoutingDecision {
        num_experts,
        capacity,
        assignments,
        expert_load: load,
    }
}

/// Copies each kept token row into its expert's slot buffer. Returns one
/// (capacity x d) matrix per expert; unfilled slots stay zero.
pub fn dispatch(tokens: &Tensor, decision: &RoutingDecision) -> Result<Vec<Tensor>, RoutingError> {
    let (t, d) = tokens.require_matrix()?;
    assert_eq!(t, decision.num_tokens(), "dispatch: token count mismatch");
    let mut buffers = vec![Tensor::zeros(&[decision.capacity, d]); decision.num_experts];
    let mut filled = vec![vec![false; decision.capacity]; decision.num_experts];
    for (token, assigns) in decision.assignments.iter().enumerate() {
        for a in assigns {
            if let (true, Some(slot)) = (a.kept, a.slot) {
                assert!(
                    !filled[a.expert][slot],
                    "dispatch: slot {slot} of expert {} assigned twice",
                    a.expert
                );
                filled[a.expert][slot] = true;
                for j in 0..d {
                    buffers[a.expert].set2(slot, j, tokens.get2(token, j));
                }
            }
        }
    }
    Ok(buffers)
}

/// Gathers expert outputs back to token order as a gate-weighted sum.
/// Tokens with no kept assignment come back as zero rows.
pub fn combine(
    expert_outputs: &[Tensor],
    decision: &RoutingDecision,
    d_model: usize,
) -> Result<Tensor, RoutingError> {
    if expert_outputs.len() != decision.num_experts {
        return Err(RoutingError::ExpertBufferCount {
            expected: decision.num_experts,
            got: expert_outputs.len(),
        });
    }
    for buf in expert_outputs {
        let (rows, cols) = buf.require_matrix()?;
        if rows != decision.capacity || cols != d_model {
            return Err(RoutingError::Shape(TensorError::ShapeMismatch {
                lhs: vec![rows, cols],
                rhs: vec![decision.capacity, d_model],
            }));
        }
    }
    let mut out = Tensor::zeros(&[decision.num_tokens(), d_model]);
    for (token, assigns) in decision.assignments.iter().enumerate() {
        for a in assigns {
            if let (true, Some(slot)) = (a.kept, a.slot) {
                for j in 0..d_model {
                    let v = out.get2(token, j) + a.gate * expert_outputs[a.expert].get2(slot, j);
                    out.set2(token, j, v);
                }
            }
        }
    }
    Ok(out)
}

/// Splits a batch of token rows into routing groups, preserving order.
pub fn split_groups(batch: &Tensor, group_size: usize) -> Result<Vec<Tensor>, RoutingError> {
    if group_size == 0 {
        return Err(RoutingError::ZeroGroupSize);
    }
    let (b, d) = batch.require_matrix()?;
    if b % group_size != 0 {
        return Err(RoutingError::GroupMismatch {
            batch: b,
            group_size,
        });
    }
    let mut groups = Vec::with_capacity(b / group_size);
    for g in 0..b / group_size {
        let mut chunk = Tensor::zeros(&[group_size, d]);
        for i in 0..group_size {
            for j in 0..d {
                chunk.set2(i, j, batch.get2(g * group_size + i, j));
            }
        }
        groups.push(chunk);
    }
    Ok(groups)
}

/// Load statistics over one routed group.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub drop_fraction: f64,
    /// Fraction of tokens whose highest-probability expert is i.
    pub dispatch_fraction: Vec<f64>,
    /// Mean router probability assigned to expert i.
    pub mean_prob: Vec<f64>,
    /// Entropy (nats) of the empirical first-choice distribution over the
    /// masked token class; 0 when the class is empty.
    pub class_entropy: f64,
}

/// Computes [`RoutingStats`]. `class_mask` selects which tokens count
/// toward the entropy; `None` means all of them.
pub fn routing_stats(
    decision: &RoutingDecision,
    probs: &Tensor,
    class_mask: Option<&[bool]>,
) -> Result<RoutingStats, RoutingError> {
    let (t, n) = probs.require_matrix()?;
    assert_eq!(t, decision.num_tokens(), "routing_stats: token count");
    assert_eq!(n, decision.num_experts, "routing_stats: expert count");
    let mut argmax_counts = vec![0usize; n];
    let mut class_counts = vec![0usize; n];
    let mut mean_prob = vec![0.0; n];
    for i in 0..t {
        let row = probs.row(i)?;
        let top = argmax(row);
        argmax_counts[top] += 1;
        if class_mask.map_or(true, |m| m[i]) {
            class_counts[top] += 1;
        }
        for j in 0..n {
            mean_prob[j] += row[j] / t as f64;
        }
    }
    let dispatch_fraction = argmax_counts
        .iter()
        .map(|&c| c as f64 / t as f64)
        .collect();
    Ok(RoutingStats {
        drop_fraction: decision.drop_fraction(),
        dispatch_fraction,
        mean_prob,
        class_entropy: entropy_from_counts(&class_counts),
    })
}

/// Natural-log entropy of an empirical count distribution.
pub fn entropy_from_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
