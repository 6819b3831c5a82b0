//! Multi-run studies: stability ablations, the z-loss A/B comparison,
//! the fine-tuning grid, dropped-token robustness, the top-n x capacity
//! routing bench, and the overfitting probe.
//!
//! Runs are independent, so they execute on a small thread pool; every
//! result lands at its job index, which keeps aggregation order (and
//! therefore report bytes) independent of scheduling.

use crate::corpus::{ClassTask, SynthCorpus};
use crate::mix_seed;
use crate::trainer::{dense_twin, finetune, train, TrainConfig, TrainError};
use moelab_core::model::{build_model, ModelConfig, Params};
use moelab_core::Tensor;
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item on up to `threads` workers, returning
/// results in input order.
pub fn parallel_map<T: Send, R: Send>(
    items: Vec<T>,
    threads: usize,
    f: impl Fn(T) -> R + Sync,
) -> Vec<R> {
    let n = items.len();
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().unwrap().take().expect("job taken twice");
                *results[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker died before finishing"))
        .collect()
}

/// Stability-study arms. Baseline keeps the router z-loss on; each
/// other arm flips exactly one knob against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    NoZLoss,
    RemoveGeglu,
    RemoveRmsScale,
    InputJitter,
    Dropout,
    UpdateClipping,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::NoZLoss,
        Variant::RemoveGeglu,
        Variant::RemoveRmsScale,
        Variant::InputJitter,
        Variant::Dropout,
        Variant::UpdateClipping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoZLoss => "no_z_loss",
            Variant::RemoveGeglu => "remove_geglu",
            Variant::RemoveRmsScale => "remove_rms_scale",
            Variant::InputJitter => "input_jitter",
            Variant::Dropout => "dropout",
            Variant::UpdateClipping => "update_clipping",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut tc = base.clone();
        match self {
            Variant::Baseline => {}
            Variant::NoZLoss => tc.loss.z_coeff = 0.0,
            Variant::RemoveGeglu => tc.remove_geglu = true,
            Variant::RemoveRmsScale => tc.remove_rms_scale = true,
            Variant::InputJitter => tc.noise.input_jitter = true,
            Variant::Dropout => tc.noise.dropout = 0.1,
            Variant::UpdateClipping => tc.clip_update_rms = Some(1.0),
        }
        tc
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub seed: u64,
    pub diverged: bool,
    pub quality: f64,
    pub avg_max_logit: f64,
}

/// One training run per (variant, seed) at the caller's (deliberately
/// aggressive) learning rate.
pub fn stability_runs(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    corpus: &SynthCorpus,
    threads: usize,
) -> Result<Vec<VariantOutcome>, TrainError> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = parallel_map(jobs, threads, |(variant, seed)| {
        let tc = variant.apply(base_train);
        train(base_model, &tc, corpus, seed).map(|out| VariantOutcome {
            variant: variant.name().to_string(),
            seed,
            diverged: out.report.diverged,
            quality: out.report.final_quality,
            avg_max_logit: out.report.avg_max_logit_last_half(),
        })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub variant: String,
    pub runs: usize,
    pub fraction_stable: f64,
    /// Mean/std of quality over stable runs; NaN when none were stable.
    pub mean_quality: f64,
    pub std_quality: f64,
    pub mean_avg_max_logit: f64,
}

pub fn aggregate_stability(outcomes: &[VariantOutcome]) -> Vec<StabilityRow> {
    let mut order: Vec<String> = Vec::new();
    for o in outcomes {
        if !order.contains(&o.variant) {
            order.push(o.variant.clone());
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let runs: Vec<&VariantOutcome> =
                outcomes.iter().filter(|o| o.variant == variant).collect();
            let stable: Vec<&&VariantOutcome> = runs.iter().filter(|o| !o.diverged).collect();
            let n_stable = stable.len();
            let mean_quality = if n_stable == 0 {
                f64::NAN
            } else {
                stable.iter().map(|o| o.quality).sum::<f64>() / n_stable as f64
            };
            let std_quality = if n_stable < 2 {
                if n_stable == 1 { 0.0 } else { f64::NAN }
            } else {
                let var = stable
                    .iter()
                    .map(|o| (o.quality - mean_quality).powi(2))
                    .sum::<f64>()
                    / (n_stable - 1) as f64;
                var.sqrt()
            };
            StabilityRow {
                variant,
                runs: runs.len(),
                fraction_stable: n_stable as f64 / runs.len() as f64,
                mean_quality,
                std_quality,
                mean_avg_max_logit: runs.iter().map(|o| o.avg_max_logit).sum::<f64>()
                    / runs.len() as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ZlossPair {
    pub seed: u64,
    pub stable_with: bool,
    pub stable_without: bool,
    pub logit_with: f64,
    pub logit_without: f64,
}

/// Paired A/B per seed: identical runs except for the z-loss
/// coefficient (the config's value vs zero).
pub fn zloss_ab_runs(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
    corpus: &SynthCorpus,
    threads: usize,
) -> Result<Vec<ZlossPair>, TrainError> {
    let results = parallel_map(seeds.to_vec(), threads, |seed| {
        let with = train(base_model, base_train, corpus, seed)?;
        let mut off = base_train.clone();
        off.loss.z_coeff = 0.0;
        let without = train(base_model, &off, corpus, seed)?;
        Ok::<_, TrainError>(ZlossPair {
            seed,
            stable_with: !with.report.diverged,
            stable_without: !without.report.diverged,
            logit_with: with.report.avg_max_logit_last_half(),
            logit_without: without.report.avg_max_logit_last_half(),
        })
    });
    results.into_iter().collect()
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    assert!(wins <= n && n <= 1023, "sign test size out of range");
    let mut log_c = 0.0_f64;
    let mut tail = 0.0_f64;
    // Walk k = 0..=n accumulating C(n,k) in log space for stability.
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (log_c - (n as f64) * 2.0_f64.ln()).exp();
        }
    }
    tail.min(1.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub algorithm: String,
    pub train_cf: f64,
    pub eval_cf: f64,
    pub quality: f64,
    pub diverged: bool,
}

/// Pre-trains once per (top-n, train capacity factor) cell and reports
/// held-out quality.
pub fn routing_bench(
    base_model: &ModelConfig,
    tc: &TrainConfig,
    top_ns: &[usize],
    cfs: &[f64],
    corpus: &SynthCorpus,
    seed: u64,
    threads: usize,
) -> Result<Vec<BenchRow>, TrainError> {
    let jobs: Vec<(usize, f64)> = top_ns
        .iter()
        .flat_map(|&n| cfs.iter().map(move |&cf| (n, cf)))
        .collect();
    let results = parallel_map(jobs, threads, |(top_n, cf)| {
        let mut cfg = base_model.clone();
        cfg.router.top_n = top_n;
        cfg.router.train_capacity_factor = cf;
        let out = train(&cfg, tc, corpus, seed)?;
        Ok::<_, TrainError>(BenchRow {
            algorithm: format!("top-{top_n}"),
            train_cf: cf,
            eval_cf: cfg.router.eval_capacity_factor,
            quality: out.report.final_quality,
            diverged: out.report.diverged,
        })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub task: String,
    pub batch_tokens: usize,
    pub peak_lr: f64,
    pub reset_optimizer: bool,
    pub final_train_acc: f64,
    pub peak_heldout_acc: f64,
    pub diverged: bool,
}

/// Batch x learning-rate x optimizer-reset fine-tuning sensitivity
/// sweep over the given tasks, from one shared starting point.
#[allow(clippy::too_many_arguments)]
pub fn finetune_grid(
    cfg: &ModelConfig,
    start: &Params,
    moments: Option<(&[Tensor], &[Tensor], usize)>,
    base: &TrainConfig,
    tasks: &[(String, ClassTask)],
    batch_sizes: &[usize],
    lrs: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<GridRow>, TrainError> {
    let mut jobs = Vec::new();
    for (name, task) in tasks {
        for &bt in batch_sizes {
            for &lr in lrs {
                for reset in [false, true] {
                    jobs.push((name.clone(), task, bt, lr, reset));
                }
            }
        }
    }
    let results = parallel_map(jobs, threads, |(name, task, bt, lr, reset)| {
        let mut tc = base.clone();
        tc.batch_tokens = bt;
        tc.peak_lr = lr;
        tc.reset_optimizer_state = reset;
        let resume = moments.map(|(m, v, t)| (m.to_vec(), v.to_vec(), t));
        let out = finetune(cfg, start.clone(), resume, &tc, task, seed)?;
        Ok::<_, TrainError>(GridRow {
            task: name,
            batch_tokens: bt,
            peak_lr: lr,
            reset_optimizer: reset,
            final_train_acc: out.final_train_acc,
            peak_heldout_acc: out.peak_heldout_acc,
            diverged: out.report.diverged,
        })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DropRow {
    pub train_cf: f64,
    pub eval_cf: f64,
    pub aux: bool,
    /// Percent of candidates dropped at the peak-validation eval point.
    pub drop_pct: f64,
    pub heldout_acc: f64,
}

/// Fine-tunes under each (train capacity factor, balance-loss on/off)
/// setting and records the drop fraction at peak validation accuracy.
pub fn drop_robustness(
    cfg: &ModelConfig,
    start: &Params,
    base: &TrainConfig,
    task: &ClassTask,
    cf_list: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<DropRow>, TrainError> {
    let mut jobs = Vec::new();
    for &aux in &[true, false] {
        for &cf in cf_list {
            jobs.push((aux, cf));
        }
    }
    let results = parallel_map(jobs, threads, |(aux, cf)| {
        let mut run_cfg = cfg.clone();
        // Both phases use the swept factor so the reported drop rate
        // reflects it directly; at cf = num_experts it must hit zero.
        run_cfg.router.train_capacity_factor = cf;
        run_cfg.router.eval_capacity_factor = cf;
        let mut tc = base.clone();
        tc.loss.balance_coeff = if aux { tc.loss.balance_coeff } else { 0.0 };
        let out = finetune(&run_cfg, start.clone(), None, &tc, task, seed)?;
        Ok::<_, TrainError>(DropRow {
            train_cf: cf,
            eval_cf: run_cfg.router.eval_capacity_factor,
            aux,
            drop_pct: 100.0 * out.drop_at_peak,
            heldout_acc: out.peak_heldout_acc,
        })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OverfitPair {
    pub seed: u64,
    /// Steps to 100% train accuracy; None when never reached.
    pub sparse_steps: Option<usize>,
    pub dense_steps: Option<usize>,
}

/// Memorization-speed probe on a small training set: an expert model
/// against its FLOP-matched dense twin. The sparse arm routes top-1 so
/// both spend the same FFN compute per token.
pub fn overfit_probe(
    base_model: &ModelConfig,
    tc: &TrainConfig,
    task: &ClassTask,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<OverfitPair>, TrainError> {
    let mut sparse_cfg = base_model.clone();
    sparse_cfg.router.top_n = 1;
    let dense_cfg = dense_twin(&sparse_cfg);
    let results = parallel_map(seeds.to_vec(), threads, |seed| {
        let run = |cfg: &ModelConfig| -> Result<Option<usize>, TrainError> {
            let params = build_model(cfg, mix_seed(seed, 0x4f46))?;
            let out = finetune(cfg, params, None, tc, task, seed)?;
            Ok(out.steps_to_full_train_acc)
        };
        Ok::<_, TrainError>(OverfitPair {
            seed,
            sparse_steps: run(&sparse_cfg)?,
            dense_steps: run(&dense_cfg)?,
        })
    });
    results.into_iter().collect()
}

/// True when the sparse arm reached full training accuracy first in a
/// strict majority of seeds.
pub fn sparse_wins_majority(pairs: &[OverfitPair]) -> bool {
    let wins = pairs
        .iter()
        .filter(|p| match (p.sparse_steps, p.dense_steps) {
            (Some(s), Some(d)) => s < d,
            (Some(_), None) => true,
            _ => false,
        })
        .count();
    2 * wins > pairs.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_returns_results_in_input_order() {
        let items: Vec<usize> = (0..97).collect();
        let doubled = parallel_map(items.clone(), 8, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let single = parallel_map(items.clone(), 1, |x| x * 2);
        assert_eq!(doubled, single);
    }

    #[test]
    fn sign_test_matches_hand_computed_tails() {
        assert!((sign_test_p(8, 8) - 1.0 / 256.0).abs() < 1e-12);
        assert!((sign_test_p(7, 8) - 9.0 / 256.0).abs() < 1e-12);
        assert!((sign_test_p(5, 8) - 93.0 / 256.0).abs() < 1e-12);
        assert!((sign_test_p(0, 8) - 1.0).abs() < 1e-12);
        assert!(sign_test_p(7, 8) < 0.05);
        assert!(sign_test_p(6, 8) > 0.05);
    }

    #[test]
    fn variants_flip_exactly_their_own_knob() {
        let base = TrainConfig::default();
        for v in Variant::ALL {
            let tc = v.apply(&base);
            match v {
                Variant::Baseline => assert_eq!(tc, base),
                Variant::NoZLoss => assert_eq!(tc.loss.z_coeff, 0.0),
                Variant::RemoveGeglu => assert!(tc.remove_geglu),
                Variant::RemoveRmsScale => assert!(tc.remove_rms_scale),
                Variant::InputJitter => assert!(tc.noise.input_jitter),
                Variant::Dropout => assert!(tc.noise.dropout > 0.0),
                Variant::UpdateClipping => assert!(tc.clip_update_rms.is_some()),
            }
        }
    }

    #[test]
    fn aggregate_keeps_variant_order_and_counts_stability() {
        let outcomes = vec![
            VariantOutcome {
                variant: "baseline".into(),
                seed: 0,
                diverged: false,
                quality: -2.0,
                avg_max_logit: 3.0,
            },
            VariantOutcome {
                variant: "baseline".into(),
                seed: 1,
                diverged: true,
                quality: f64::NAN,
                avg_max_logit: 50.0,
            },
            VariantOutcome {
                variant: "no_z_loss".into(),
                seed: 0,
                diverged: true,
                quality: f64::NAN,
                avg_max_logit: 80.0,
            },
        ];
        let rows = aggregate_stability(&outcomes);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, "baseline");
        assert_eq!(rows[0].fraction_stable, 0.5);
        assert_eq!(rows[0].mean_quality, -2.0);
        assert_eq!(rows[1].variant, "no_z_loss");
        assert_eq!(rows[1].fraction_stable, 0.0);
        assert!(rows[1].mean_quality.is_nan());
    }

    #[test]
    fn sparse_majority_requires_strict_wins() {
        let win = |s, d| OverfitPair { seed: 0, sparse_steps: Some(s), dense_steps: Some(d) };
        assert!(sparse_wins_majority(&[win(10, 20), win(10, 20), win(30, 20)]));
        assert!(!sparse_wins_majority(&[win(10, 10), win(10, 20), win(30, 20)]));
        assert!(!sparse_wins_majority(&[
            OverfitPair { seed: 0, sparse_steps: None, dense_steps: None },
            win(10, 20)
        ]));
    }
}
