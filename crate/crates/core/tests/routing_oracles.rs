//! Routing pipeline vs independent oracles.
//!
//! The dispatch/combine implementation is checked against a naive
//! per-token loop that never builds expert buffers; capacity dropping is
//! checked against exhaustive subset enumeration. The oracles are
//! deliberately dumb: correctness here anchors everything the model
//! layer builds on top.

use moelab_core::ops::matmul;
use moelab_core::routing::{
    assign_capacity, combine, compute_gates, dispatch, expert_capacity, select_top_n,
    Candidate, DropPolicy, Phase, RouterConfig, RouterPrecision, RoutingDecision, Top1Gate,
};
use moelab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// y[t] = sum over kept assignments of gate * (x[t] @ W[expert]),
/// computed token by token with scalar loops.
fn combine_oracle(
    tokens: &Tensor,
    decision: &RoutingDecision,
    expert_mats: &[Tensor],
) -> Tensor {
    let (t, d) = tokens.require_matrix().unwrap();
    let mut y = Tensor::zeros(&[t, d]);
    for tok in 0..t {
        for a in &decision.assignments[tok] {
            if !a.kept {
                continue;
            }
            let w = &expert_mats[a.expert];
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += tokens.get2(tok, k) * w.get2(k, j);
                }
                let v = y.get2(tok, j) + a.gate * acc;
                y.set2(tok, j, v);
            }
        }
    }
    y
}

fn total_kept_gate_mass(decision: &RoutingDecision) -> f64 {
    decision
        .assignments
        .iter()
        .flat_map(|a| a.iter())
        .filter(|a| a.kept)
        .map(|a| a.gate)
        .sum()
}

/// Best achievable kept-gate mass: per expert, enumerate every subset of
/// its candidates no larger than capacity and take the best one. Experts
/// are independent, so the per-expert optima sum to the global optimum.
fn max_kept_mass_by_enumeration(
    candidates: &[Vec<Candidate>],
    num_experts: usize,
    capacity: usize,
) -> f64 {
    let mut total = 0.0;
    for e in 0..num_experts {
        let gates: Vec<f64> = candidates
            .iter()
            .flat_map(|c| c.iter())
            .filter(|c| c.expert == e)
            .map(|c| c.gate)
            .collect();
        assert!(gates.len() <= 20, "enumeration oracle kept small on purpose");
        let mut best = 0.0_f64;
        for mask in 0u32..(1 << gates.len()) {
            if (mask.count_ones() as usize) > capacity {
                continue;
            }
            let mass: f64 = gates
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, g)| g)
                .sum();
            best = best.max(mass);
        }
        total += best;
    }
    total
}

fn random_instance(
    seed: u64,
) -> (RouterConfig, Tensor, Tensor, Vec<Tensor>, usize, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = rng.gen_range(1..=12);
    let num_experts = rng.gen_range(1..=4);
    let top_n = rng.gen_range(1..=2.min(num_experts));
    let cf = [0.5, 1.0, 1.25, 2.0, 4.0][rng.gen_range(0..5)];
    let config = RouterConfig {
        num_experts,
        top_n,
        train_capacity_factor: cf,
        eval_capacity_factor: cf,
        threshold: [0.05, 0.2, 0.7][rng.gen_range(0..3)],
        group_size: group,
        jitter_eps: 0.0,
        drop_policy: if rng.gen() {
            DropPolicy::LeftToRight
        } else {
            DropPolicy::BatchPrioritized
        },
        router_precision: RouterPrecision::Float64,
        top1_gate: if rng.gen() {
            Top1Gate::RawProb
        } else {
            Top1Gate::Unit
        },
    };
    let d = rng.gen_range(1..=6);
    let tokens = rand_tensor(&mut rng, &[group, d], -2.0, 2.0);
    let router = rand_tensor(&mut rng, &[d, num_experts], -1.5, 1.5);
    let mats = (0..num_experts)
        .map(|_| rand_tensor(&mut rng, &[d, d], -1.0, 1.0))
        .collect();
    (config, tokens, router, mats, d, rng)
}

#[test]
fn dispatch_combine_matches_per_token_oracle_across_seeds() {
    let mut max_diff = 0.0_f64;
    for seed in 0..1000 {
        let (config, tokens, router, mats, d, mut rng) = random_instance(seed);
        let phase = if seed % 2 == 0 { Phase::Train } else { Phase::Eval };
        let (_logits, probs) = compute_gates(
            &tokens,
            &router,
            config.jitter_eps,
            phase,
            config.router_precision,
            &mut rng,
        )
        .unwrap();
        let candidates = select_top_n(&probs, &config, phase, &mut rng).unwrap();
        let capacity = expert_capacity(
            config.group_size,
            config.num_experts,
            config.capacity_factor(phase),
        );
        let decision =
            assign_capacity(&candidates, config.num_experts, capacity, config.drop_policy);

        let buffers = dispatch(&tokens, &decision).unwrap();
        let outputs: Vec<Tensor> = buffers
            .iter()
            .zip(&mats)
            .map(|(b, w)| matmul(b, w).unwrap())
            .collect();
        let y = combine(&outputs, &decision, d).unwrap();
        let want = combine_oracle(&tokens, &decision, &mats);
        let diff = y.max_abs_diff(&want).unwrap();
        max_diff = max_diff.max(diff);
        assert!(diff < 1e-12, "seed {seed}: pipeline vs oracle diff {diff}");
    }
    println!("dispatch/combine vs naive loop, 1000 seeds: max diff {max_diff:.3e}");
}

#[test]
fn batch_prioritized_keeps_at_least_left_to_right_mass() {
    for seed in 0..1000 {
        let (config, tokens, router, _mats, _d, mut rng) = random_instance(seed);
        let (_, probs) = compute_gates(
            &tokens,
            &router,
            0.0,
            Phase::Eval,
            RouterPrecision::Float64,
            &mut rng,
        )
        .unwrap();
        let candidates = select_top_n(&probs, &config, Phase::Eval, &mut rng).unwrap();
        let capacity = expert_capacity(config.group_size, config.num_experts, 0.75);

        let bpr = assign_capacity(
            &candidates,
            config.num_experts,
            capacity,
            DropPolicy::BatchPrioritized,
        );
        let l2r = assign_capacity(
            &candidates,
            config.num_experts,
            capacity,
            DropPolicy::LeftToRight,
        );
        let bpr_mass = total_kept_gate_mass(&bpr);
        let l2r_mass = total_kept_gate_mass(&l2r);
        assert!(
            bpr_mass >= l2r_mass - 1e-12,
            "seed {seed}: bpr mass {bpr_mass} < l2r mass {l2r_mass}"
        );
    }
}

#[test]
fn batch_prioritized_is_optimal_by_exhaustive_enumeration() {
    // Smaller instances so each expert sees at most 20 candidates and
    // the subset space stays enumerable.
    let mut checked = 0;
    for seed in 0..300 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let group = rng.gen_range(1..=8);
        let num_experts = rng.gen_range(1..=4);
        let config = RouterConfig {
            num_experts,
            top_n: rng.gen_range(1..=2.min(num_experts)),
            group_size: group,
            jitter_eps: 0.0,
            ..RouterConfig::default()
        };
        let d = 4;
        let tokens = rand_tensor(&mut rng, &[group, d], -2.0, 2.0);
        let router = rand_tensor(&mut rng, &[d, num_experts], -1.5, 1.5);
        let (_, probs) = compute_gates(
            &tokens,
            &router,
            0.0,
            Phase::Eval,
            RouterPrecision::Float64,
            &mut rng,
        )
        .unwrap();
        let candidates = select_top_n(&probs, &config, Phase::Eval, &mut rng).unwrap();
        let capacity = expert_capacity(group, num_experts, 0.5);

        let bpr = assign_capacity(
            &candidates,
            num_experts,
            capacity,
            DropPolicy::BatchPrioritized,
        );
        let got = total_kept_gate_mass(&bpr);
        let best = max_kept_mass_by_enumeration(&candidates, num_experts, capacity);
        assert!(
            (got - best).abs() < 1e-12,
            "seed {seed}: bpr mass {got} != enumerated optimum {best}"
        );
        checked += 1;
    }
    assert_eq!(checked, 300);
}

#[test]
fn drop_fraction_non_increasing_in_capacity_factor() {
    for seed in 0..200 {
        let (config, tokens, router, _mats, _d, mut rng) = random_instance(seed);
        let (_, probs) = compute_gates(
            &tokens,
            &router,
            0.0,
            Phase::Eval,
            RouterPrecision::Float64,
            &mut rng,
        )
        .unwrap();
        // Candidate set fixed once; only the capacity sweep varies.
        let candidates = select_top_n(&probs, &config, Phase::Eval, &mut rng).unwrap();
        for policy in [DropPolicy::LeftToRight, DropPolicy::BatchPrioritized] {
            let mut prev = f64::INFINITY;
            let n = config.num_experts as f64;
            let mut cf = 0.25;
            while cf <= n + 0.25 {
                let cap = expert_capacity(config.group_size, config.num_experts, cf);
                let decision = assign_capacity(&candidates, config.num_experts, cap, policy);
                let frac = decision.drop_fraction();
                assert!(
                    frac <= prev + 1e-15,
                    "seed {seed} {policy:?}: drop fraction rose {prev} -> {frac} at cf {cf}"
                );
                prev = frac;
                cf += 0.25;
            }
            // At CF = N the capacity clamps to the whole group: every
            // candidate fits.
            let cap = expert_capacity(config.group_size, config.num_experts, n);
            let decision = assign_capacity(&candidates, config.num_experts, cap, policy);
            assert_eq!(
                decision.drop_fraction(),
                0.0,
                "seed {seed} {policy:?}: drops remain at cf = num_experts"
            );
        }
    }
}

#[test]
fn threshold_sampling_keep_rate_matches_the_rule() {
    // One token with a pinned gate distribution; count how often the
    // rank-2 candidate survives training selection. The expected keep
    // rate is min(1, gate / threshold); a binomial 3-sigma band around
    // it must contain the empirical rate.
    let cases: [([f64; 2], f64); 4] = [
        // (logit pair -> renormalized rank-2 gate), threshold
        ([2.0, 0.0], 0.2),
        ([1.0, 0.0], 0.3),
        ([0.5, 0.0], 0.9),
        ([0.2, 0.0], 0.05), // saturated: gate > threshold keeps always
    ];
    let draws = 100_000;
    for (logits, threshold) in cases {
        let e0 = logits[0].exp();
        let e1: f64 = logits[1].exp();
        let p1 = e1 / (e0 + e1);
        // top_n = 2 renormalizes over both experts, so the gate equals
        // the raw probability here.
        let expected = (p1 / threshold).min(1.0);

        let config = RouterConfig {
            num_experts: 2,
            top_n: 2,
            threshold,
            group_size: 1,
            jitter_eps: 0.0,
            ..RouterConfig::default()
        };
        let probs = Tensor::from_rows(&[vec![1.0 - p1, p1]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut kept = 0usize;
        for _ in 0..draws {
            let cands = select_top_n(&probs, &config, Phase::Train, &mut rng).unwrap();
            assert_eq!(cands[0][0].rank, 0);
            if cands[0].len() == 2 {
                kept += 1;
            }
        }
        let rate = kept as f64 / draws as f64;
        let sigma = (expected * (1.0 - expected) / draws as f64).sqrt();
        assert!(
            (rate - expected).abs() <= 3.0 * sigma.max(1e-12),
            "gate {p1:.4} threshold {threshold}: rate {rate:.5} vs expected {expected:.5} \
             (3 sigma = {:.5})",
            3.0 * sigma
        );
    }
}

#[test]
fn eval_selection_is_threshold_free_and_deterministic() {
    let config = RouterConfig {
        num_experts: 3,
        top_n: 2,
        threshold: 0.99,
        group_size: 2,
        jitter_eps: 0.0,
        ..RouterConfig::default()
    };
    let probs = Tensor::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.45, 0.45]]).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = select_top_n(&probs, &config, Phase::Eval, &mut rng).unwrap();
        assert_eq!(cands[0].len(), 2);
        assert_eq!(cands[1].len(), 2);
        assert_eq!(cands[0][0].expert, 0);
        assert_eq!(cands[0][1].expert, 1);
        // Tie at 0.45 resolves toward the lower expert index.
        assert_eq!(cands[1][0].expert, 1);
        assert_eq!(cands[1][1].expert, 2);
    }
}
