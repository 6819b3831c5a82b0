//! Fast invariant checks runnable from the CLI. Each check is a named
//! closed-form property with a known answer; together they catch a
//! miscompiled or misported build in about a second without training
//! anything.

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::corpus::SynthCorpus;
use crate::optim::Schedule;
use moelab_core::losses::{load_balance_loss, router_z_loss};
use moelab_core::mesh::{comm_cost, plan_mesh, CommOp, MeshShape};
use moelab_core::model::{build_model, ModelConfig};
use moelab_core::precision::{round_to_format, softmax_in_format, FloatFormat};
use moelab_core::routing::{
    assign_capacity, entropy_from_counts, expert_capacity, select_top_n, DropPolicy, Phase,
    RouterConfig,
};
use moelab_core::{ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

type CheckFn = fn() -> Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

fn expect(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn softmax_precision_anchor() -> Result<String, String> {
    let mut logits = vec![128.0; 11];
    logits[0] = 128.5;
    let exact = ops::softmax(&logits).map_err(|e| e.to_string())?;
    let bf = softmax_in_format(&logits, FloatFormat::bfloat16());
    expect(
        (exact[0] - 0.142).abs() < 0.002,
        format!("64-bit top prob {:.4}, want 0.142 +/- 0.002", exact[0]),
    )?;
    expect(
        (bf[0] - 0.091).abs() < 0.002,
        format!("bfloat16 top prob {:.4}, want 0.091 +/- 0.002", bf[0]),
    )?;
    Ok(format!("64-bit {:.4}, bfloat16 {:.4}", exact[0], bf[0]))
}

fn ulp_ratio_bf16_f32() -> Result<String, String> {
    let bf16 = FloatFormat::bfloat16();
    let f32f = FloatFormat::float32();
    for x in [1.0, 1.25, 1.5, 1.9999] {
        let ratio = bf16.ulp(x) / f32f.ulp(x);
        expect(
            ratio == 65536.0,
            format!("ulp ratio at {x} is {ratio}, want exactly 65536"),
        )?;
    }
    Ok("bf16/f32 ulp ratio on [1,2) is 65536".into())
}

fn rounding_idempotent_and_monotone() -> Result<String, String> {
    let fmt = FloatFormat::bfloat16();
    let mut prev = f64::NEG_INFINITY;
    for i in -400..400 {
        let x = i as f64 * 0.37 + 0.001;
        let once = round_to_format(x, fmt).value;
        let twice = round_to_format(once, fmt).value;
        expect(once == twice, format!("rounding not idempotent at {x}"))?;
        if i > -400 {
            expect(once >= prev, format!("rounding not monotone at {x}"))?;
        }
        prev = once;
    }
    Ok("800-point sweep idempotent and monotone".into())
}

fn balance_loss_uniform_and_collapse() -> Result<String, String> {
    let n = 8;
    let t = 24;
    let alpha = 1e-2;
    let uniform = Tensor::new(&[t, n], vec![1.0 / n as f64; t * n]).map_err(|e| e.to_string())?;
    let lb_u = load_balance_loss(&uniform, alpha).map_err(|e| e.to_string())?;
    expect(
        (lb_u - alpha).abs() < 1e-12,
        format!("uniform balance loss {lb_u}, want alpha {alpha}"),
    )?;
    let mut collapse = vec![0.0; t * n];
    for i in 0..t {
        collapse[i * n + 2] = 1.0;
    }
    let collapse = Tensor::new(&[t, n], collapse).map_err(|e| e.to_string())?;
    let lb_c = load_balance_loss(&collapse, alpha).map_err(|e| e.to_string())?;
    expect(
        (lb_c - alpha * n as f64).abs() < 1e-12,
        format!("collapsed balance loss {lb_c}, want alpha*N {}", alpha * n as f64),
    )?;
    Ok(format!("uniform {lb_u:.4}, collapsed {lb_c:.4}"))
}

fn z_loss_closed_forms() -> Result<String, String> {
    let single = Tensor::new(&[1, 2], vec![0.0, 0.0]).map_err(|e| e.to_string())?;
    let z = router_z_loss(&single).map_err(|e| e.to_string())?;
    let want = 2.0_f64.ln().powi(2);
    expect(
        (z - want).abs() < 1e-12,
        format!("z loss on [0,0] is {z}, want (ln 2)^2 = {want}"),
    )?;
    // Rows whose exponentials sum to one have log-sum-exp zero.
    let o = (0.5_f64).ln();
    let balanced = Tensor::new(&[2, 2], vec![o, o, o, o]).map_err(|e| e.to_string())?;
    let z0 = router_z_loss(&balanced).map_err(|e| e.to_string())?;
    expect(z0.abs() < 1e-12, format!("z loss on exp-sum-1 rows is {z0}, want 0"))?;
    Ok(format!("(ln 2)^2 row {z:.6}, exp-sum-1 rows {z0:.1e}"))
}

fn capacity_clamp_and_monotone() -> Result<String, String> {
    let group = 16;
    let n = 4;
    let mut prev = 0;
    let mut cf = 0.05;
    while cf <= n as f64 + 0.25 {
        let cap = expert_capacity(group, n, cf);
        expect(
            (1..=group).contains(&cap),
            format!("capacity {cap} outside [1, {group}] at cf {cf}"),
        )?;
        expect(cap >= prev, format!("capacity not monotone at cf {cf}"))?;
        prev = cap;
        cf += 0.05;
    }
    let full = expert_capacity(group, n, n as f64);
    expect(full == group, format!("capacity at cf=N is {full}, want {group}"))?;
    Ok("clamped to [1, group], monotone in cf, full at cf=N".into())
}

fn threshold_keep_rate_spot() -> Result<String, String> {
    // Rank-2 renormalized gate 0.10/0.95; expected keep rate is
    // gate/threshold since that is below one.
    let row = vec![0.85, 0.05, 0.10];
    let gate = 0.10 / 0.95;
    let config = RouterConfig {
        num_experts: 3,
        top_n: 2,
        threshold: 0.2,
        jitter_eps: 0.0,
        ..RouterConfig::default()
    };
    let trials = 20_000;
    let probs =
        Tensor::new(&[trials, 3], row.repeat(trials)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cands = select_top_n(&probs, &config, Phase::Train, &mut rng).map_err(|e| e.to_string())?;
    let kept = cands.iter().filter(|c| c.len() == 2).count();
    let rate = kept as f64 / trials as f64;
    let want = (gate / config.threshold).min(1.0);
    let sigma = (want * (1.0 - want) / trials as f64).sqrt();
    expect(
        (rate - want).abs() < 3.0 * sigma,
        format!("rank-2 keep rate {rate:.4}, want {want:.4} +/- {:.4}", 3.0 * sigma),
    )?;
    Ok(format!("keep rate {rate:.4} vs expected {want:.4}"))
}

fn eval_routing_deterministic_and_renormalized() -> Result<String, String> {
    let config = RouterConfig {
        num_experts: 4,
        top_n: 2,
        jitter_eps: 0.0,
        ..RouterConfig::default()
    };
    let probs = Tensor::new(
        &[3, 4],
        vec![0.4, 0.3, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25, 0.1, 0.2, 0.3, 0.4],
    )
    .map_err(|e| e.to_string())?;
    let mut rng_a = ChaCha8Rng::seed_from_u64(1);
    let mut rng_b = ChaCha8Rng::seed_from_u64(2);
    let a = select_top_n(&probs, &config, Phase::Eval, &mut rng_a).map_err(|e| e.to_string())?;
    let b = select_top_n(&probs, &config, Phase::Eval, &mut rng_b).map_err(|e| e.to_string())?;
    expect(a == b, "eval candidate selection depends on the rng".into())?;
    for cands in &a {
        expect(cands.len() == 2, "eval must keep every top-n candidate".into())?;
        let total: f64 = cands.iter().map(|c| c.gate).sum();
        expect(
            (total - 1.0).abs() < 1e-12,
            format!("top-2 gates sum to {total}, want 1"),
        )?;
    }
    // Tied row must break toward the lower expert index.
    expect(
        a[1][0].expert == 0 && a[1][1].expert == 1,
        format!("tie broke to experts {:?}", (a[1][0].expert, a[1][1].expert)),
    )?;
    let decision = assign_capacity(&a, 4, 1, DropPolicy::LeftToRight);
    expect(
        decision.assignments[0][0].kept,
        "rank-1 candidate with free capacity was dropped".into(),
    )?;
    Ok("deterministic, renormalized, ties to lower index".into())
}

fn span_corruption_roundtrip() -> Result<String, String> {
    let corpus = SynthCorpus::new(11);
    let (stream, examples, raw_len) = (9u64, 2usize, 24usize);
    for step in 0..40u64 {
        let batch = corpus
            .span_batch(stream, step, examples, raw_len, 3.0, 0.15)
            .map_err(|e| e.to_string())?;
        for i in 0..examples {
            let index = crate::mix_seed(stream, step * examples as u64 + i as u64);
            let original = corpus.sequence(index, raw_len);
            let rebuilt = crate::corpus::splice(&batch.enc_ids[i], &batch.dec_targets[i]);
            expect(
                rebuilt == original,
                format!("splice mismatch at step {step} example {i}"),
            )?;
        }
    }
    Ok("80 corrupted sequences splice back exactly".into())
}

fn entropy_anchors() -> Result<String, String> {
    let uniform = entropy_from_counts(&[10; 32]);
    expect(
        (uniform - 3.47).abs() < 0.01,
        format!("uniform 32-expert entropy {uniform:.4}, want 3.47 +/- 0.01"),
    )?;
    let mut collapsed = [0usize; 32];
    collapsed[7] = 320;
    let zero = entropy_from_counts(&collapsed);
    expect(zero == 0.0, format!("collapsed entropy {zero}, want 0"))?;
    Ok(format!("uniform {uniform:.4}, collapsed {zero}"))
}

fn mesh_factorization_anchors() -> Result<String, String> {
    let flat = plan_mesh(32, 32, 8, 4).map_err(|e| e.to_string())?;
    expect(
        flat.shape == MeshShape::TwoD { data: 8, model: 4 },
        format!("32 cores, 32 experts: {:?}", flat.shape),
    )?;
    let nested = plan_mesh(32, 2, 8, 4).map_err(|e| e.to_string())?;
    expect(
        nested.shape
            == MeshShape::ThreeD {
                outer: 4,
                inner: 2,
                model: 4,
            },
        format!("32 cores, 2 experts: {:?}", nested.shape),
    )?;
    Ok("8x4 flat; outer 4, inner 2, model 4 nested".into())
}

fn comm_cost_invariances() -> Result<String, String> {
    // All-to-all volume must ignore the expert count axis entirely (it
    // has no expert parameter) and scale linearly in capacity factor.
    let base = comm_cost(CommOp::AllToAll, 4096.0, 512.0, 1.0, 8.0, 4.0);
    let double_cf = comm_cost(CommOp::AllToAll, 4096.0, 512.0, 2.0, 8.0, 4.0);
    expect(
        (double_cf - 2.0 * base).abs() < 1e-9,
        format!("all-to-all not linear in cf: {base} -> {double_cf}"),
    )?;
    let grad_a = comm_cost(
        CommOp::GradientAllReduce { param_count: 1e6 },
        1024.0,
        512.0,
        1.25,
        8.0,
        4.0,
    );
    let grad_b = comm_cost(
        CommOp::GradientAllReduce { param_count: 1e6 },
        8192.0,
        512.0,
        1.25,
        8.0,
        4.0,
    );
    expect(
        grad_a == grad_b,
        format!("gradient all-reduce depends on batch: {grad_a} vs {grad_b}"),
    )?;
    Ok("all-to-all linear in cf; gradient sync batch-invariant".into())
}

fn lr_schedule_shape() -> Result<String, String> {
    let s = Schedule {
        peak_lr: 1e-2,
        warmup_steps: 100,
    };
    expect(
        (s.lr_at(100) - 1e-2).abs() < 1e-15,
        format!("lr at warmup end {}, want peak", s.lr_at(100)),
    )?;
    expect(
        (s.lr_at(50) - 5e-3).abs() < 1e-15,
        format!("lr mid-warmup {}, want half peak", s.lr_at(50)),
    )?;
    expect(
        (s.lr_at(400) - 5e-3).abs() < 1e-15,
        format!("lr at 4x warmup {}, want peak/2", s.lr_at(400)),
    )?;
    Ok("linear warmup into inverse-sqrt decay".into())
}

fn checkpoint_byte_roundtrip() -> Result<String, String> {
    let cfg = ModelConfig {
        num_layers: 1,
        d_model: 8,
        d_ff: 8,
        d_kv: 4,
        num_heads: 2,
        vocab_size: 30,
        enc_len: 4,
        dec_len: 4,
        ..ModelConfig::default()
    };
    let params = build_model(&cfg, 3).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &cfg, &params, None).map_err(|e| e.to_string())?;
    let loaded = read_checkpoint(&mut buf.as_slice()).map_err(|e| e.to_string())?;
    let mut buf2 = Vec::new();
    write_checkpoint(&mut buf2, &loaded.config, &loaded.params, None)
        .map_err(|e| e.to_string())?;
    expect(buf == buf2, "write-read-write is not byte stable".into())?;
    expect(
        loaded.params.num_scalars() == params.num_scalars(),
        "parameter count changed through the roundtrip".into(),
    )?;
    Ok(format!("{} bytes, stable across rewrite", buf.len()))
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "softmax-precision-anchor", run: softmax_precision_anchor },
        Check { name: "ulp-ratio-bf16-f32", run: ulp_ratio_bf16_f32 },
        Check { name: "rounding-idempotent-monotone", run: rounding_idempotent_and_monotone },
        Check { name: "balance-loss-anchors", run: balance_loss_uniform_and_collapse },
        Check { name: "z-loss-closed-forms", run: z_loss_closed_forms },
        Check { name: "capacity-clamp-monotone", run: capacity_clamp_and_monotone },
        Check { name: "threshold-keep-rate", run: threshold_keep_rate_spot },
        Check { name: "eval-routing-deterministic", run: eval_routing_deterministic_and_renormalized },
        Check { name: "span-corruption-roundtrip", run: span_corruption_roundtrip },
        Check { name: "entropy-anchors", run: entropy_anchors },
        Check { name: "mesh-factorization-anchors", run: mesh_factorization_anchors },
        Check { name: "comm-cost-invariances", run: comm_cost_invariances },
        Check { name: "lr-schedule-shape", run: lr_schedule_shape },
        Check { name: "checkpoint-byte-roundtrip", run: checkpoint_byte_roundtrip },
    ]
}

/// Runs every check, printing one line each. Returns true when all pass.
pub fn run_all(out: &mut impl Write) -> std::io::Result<bool> {
    let mut ok = true;
    for check in all_checks() {
        match (check.run)() {
            Ok(detail) => writeln!(out, "pass  {:32} {detail}", check.name)?,
            Err(why) => {
                ok = false;
                writeln!(out, "FAIL  {:32} {why}", check.name)?;
            }
        }
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let mut out = Vec::new();
        assert!(run_all(&mut out).unwrap(), "{}", String::from_utf8_lossy(&out));
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), all_checks().len());
        assert!(text.lines().all(|l| l.starts_with("pass")));
    }

    #[test]
    fn check_names_are_unique() {
        let mut names: Vec<_> = all_checks().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(names.len(), before);
    }
}
