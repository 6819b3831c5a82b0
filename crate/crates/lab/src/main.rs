//! Experiment driver. Every subcommand is deterministic given
//! (config, seed): outputs carry no timestamps, floats print in
//! shortest-roundtrip form, and each run writes a manifest with the
//! effective config inline so it can be reproduced from the output
//! directory alone.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use moelab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use moelab::config::{CliConfig, ConfigError, StudyParams};
use moelab::corpus::{classification_task, ClassTask, SynthCorpus};
use moelab::reports::{fmt_f64, write_csv, write_eval_report, write_run_report};
use moelab::study::{
    aggregate_stability, drop_robustness, finetune_grid, routing_bench, stability_runs,
    zloss_ab_runs, Variant,
};
use moelab::tracer::{trace_forward, write_trace};
use moelab::mix_seed;
use moelab::trainer::{self, dense_twin, TrainConfig, TrainError, TrainOutcome};
use moelab_core::mesh::{
    operational_intensity, plan_mesh, step_time_estimate, HardwareProfile, MeshSpec,
};
use moelab_core::model::{build_model, ModelConfig, Params};
use moelab_core::precision::{softmax_in_format, FloatFormat};
use moelab_core::{ops, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::ExitCode;

const TAG_CORPUS: u64 = 0x434f_5250;
const TAG_TASK: u64 = 0x5441_534b;
const TAG_FRESH_PARAMS: u64 = 0x4652_5348;

#[derive(Parser)]
#[command(
    name = "moelab",
    version,
    about = "Desk-scale sparse mixture-of-experts experiments"
)]
struct Cli {
    /// JSON config overlaying the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's first seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to ST_MOE_THREADS, then the host count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Span-corruption pre-training; writes the step report, a summary,
    /// and a resumable checkpoint. Exits 1 if the run diverges.
    Train,
    /// Batch x learning-rate x optimizer-reset fine-tuning grid on
    /// small and large classification tasks, for the checkpointed
    /// sparse model and a FLOP-matched dense twin.
    Finetune {
        /// Starting checkpoint; omitted means a fresh pre-training run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Architecture and noise ablations at a deliberately aggressive
    /// learning rate, plus a paired z-loss on/off comparison.
    StabilityStudy,
    /// Pre-training quality across top-n and train capacity factor.
    RoutingBench,
    /// Fine-tuning quality as capacity factor and the balance loss
    /// vary, with token-drop rates at peak validation accuracy.
    DropRobustness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-token routing trace over one span-corruption batch.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Examples in the traced batch.
        #[arg(long, default_value_t = 4)]
        examples: usize,
    },
    /// Softmax under emulated number formats on near-tied large logits.
    PrecisionDemo,
    /// Mesh factorization with first-order step-time costs.
    MeshPlan {
        #[arg(long, default_value_t = 32)]
        cores: usize,
        /// Expert count; defaults to the config's router setting.
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long, default_value_t = 8)]
        data_parallel: usize,
        #[arg(long, default_value_t = 4)]
        model_parallel: usize,
        /// Global tokens per step priced by the cost model.
        #[arg(long, default_value_t = 65536)]
        batch_tokens: usize,
    },
    /// Invariant suite; prints one pass/fail line per property.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Config-shaped mistakes get their own exit code so scripts
            // can tell a bad invocation from a bad run.
            let config_shaped = err.downcast_ref::<ConfigError>().is_some()
                || err.downcast_ref::<CheckpointError>().is_some()
                || matches!(err.downcast_ref::<TrainError>(), Some(TrainError::BadConfig(_)))
                || matches!(
                    err.downcast_ref::<TrainError>(),
                    Some(TrainError::IncompatibleCheckpoint(_))
                );
            if config_shaped {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

struct Ctx {
    cfg: CliConfig,
    model: ModelConfig,
    tc: TrainConfig,
    study: StudyParams,
    seed: u64,
    threads: usize,
    out_dir: PathBuf,
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("ST_MOE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
    .max(1)
}

fn load_ctx(cli: &Cli) -> Result<Ctx> {
    let cfg = match &cli.config {
        Some(path) => CliConfig::from_path(path)?,
        None => CliConfig::default(),
    };
    let model = cfg.model_config();
    model
        .validate()
        .map_err(|e| ConfigError::Parse(format!("model section: {e}")))?;
    let tc = cfg.train_config();
    tc.validate()?;
    let seed = cli.seed.unwrap_or_else(|| tc.seeds.first().copied().unwrap_or(0));
    let out_dir = cli.out.clone();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    Ok(Ctx {
        study: cfg.study_params(),
        cfg,
        model,
        tc,
        seed,
        threads: resolve_threads(cli.threads),
        out_dir,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    tool_version: &'static str,
    subcommand: &'static str,
    seed: u64,
    threads: usize,
    config_sha256: String,
    /// The effective config, inline, sufficient to re-run.
    config: &'a CliConfig,
    outputs: Vec<String>,
}

fn write_manifest(ctx: &Ctx, subcommand: &'static str, outputs: &[&str]) -> Result<()> {
    let config_json = serde_json::to_string_pretty(&ctx.cfg)?;
    let digest = Sha256::digest(config_json.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed: ctx.seed,
        threads: ctx.threads,
        config_sha256: hex,
        config: &ctx.cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = ctx.out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn corpus_for(ctx: &Ctx) -> SynthCorpus {
    SynthCorpus::new(mix_seed(ctx.seed, TAG_CORPUS))
}

fn tasks_for(ctx: &Ctx, corpus: &SynthCorpus, cfg: &ModelConfig) -> (ClassTask, ClassTask) {
    let p = &ctx.study;
    let seq_len = cfg.enc_len;
    let small = classification_task(
        corpus,
        p.num_classes,
        p.small_train_examples,
        p.heldout_examples,
        seq_len,
        mix_seed(ctx.seed, TAG_TASK),
    );
    let large = classification_task(
        corpus,
        p.num_classes,
        p.large_train_examples,
        p.heldout_examples,
        seq_len,
        mix_seed(ctx.seed, TAG_TASK ^ 1),
    );
    (small, large)
}

/// Loads the checkpoint, or pre-trains from scratch when none is given.
fn starting_point(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    corpus: &SynthCorpus,
) -> Result<(ModelConfig, Params, Option<(Vec<Tensor>, Vec<Tensor>, usize)>)> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            Ok((ck.config, ck.params, ck.moments))
        }
        None => {
            eprintln!("no checkpoint given; pre-training {} steps first", ctx.tc.steps);
            let out = trainer::train(&ctx.model, &ctx.tc, corpus, ctx.seed)?;
            let (m, v) = out.optimizer.moments();
            let moments = Some((m.to_vec(), v.to_vec(), out.optimizer.step_count));
            Ok((out.config, out.params, moments))
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let ctx = load_ctx(cli)?;
    match &cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Finetune { checkpoint } => cmd_finetune(&ctx, checkpoint),
        Command::StabilityStudy => cmd_stability(&ctx),
        Command::RoutingBench => cmd_routing_bench(&ctx),
        Command::DropRobustness { checkpoint } => cmd_drop_robustness(&ctx, checkpoint),
        Command::Trace { checkpoint, examples } => cmd_trace(&ctx, checkpoint, *examples),
        Command::PrecisionDemo => cmd_precision_demo(&ctx),
        Command::MeshPlan {
            cores,
            experts,
            data_parallel,
            model_parallel,
            batch_tokens,
        } => cmd_mesh_plan(
            &ctx,
            *cores,
            experts.unwrap_or(ctx.model.router.num_experts),
            *data_parallel,
            *model_parallel,
            *batch_tokens,
        ),
        Command::Selfcheck => cmd_selfcheck(&ctx),
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    steps_run: usize,
    diverged: bool,
    initial_total: f64,
    final_quality: f64,
    routing_entropy: &'a [trainer::LayerEntropy],
}

fn cmd_train(ctx: &Ctx) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let out: TrainOutcome = trainer::train(&ctx.model, &ctx.tc, &corpus, ctx.seed)?;
    write_run_report(&ctx.out_dir.join("train_report.csv"), &out.report)?;
    let summary = RunSummary {
        seed: ctx.seed,
        steps_run: out.report.steps.len(),
        diverged: out.report.diverged,
        initial_total: out.report.initial_total,
        final_quality: out.report.final_quality,
        routing_entropy: &out.report.routing_entropy,
    };
    std::fs::write(
        ctx.out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let (m, v) = out.optimizer.moments();
    save_checkpoint(
        &ctx.out_dir.join("checkpoint.bin"),
        &out.config,
        &out.params,
        Some((m, v, out.optimizer.step_count)),
    )?;
    write_manifest(
        ctx,
        "train",
        &["train_report.csv", "run_summary.json", "checkpoint.bin"],
    )?;
    println!(
        "train: {} steps, diverged={}, final quality {:.4}",
        out.report.steps.len(),
        out.report.diverged,
        out.report.final_quality
    );
    Ok(if out.report.diverged {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_finetune(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let (sparse_cfg, sparse_start, sparse_moments) = starting_point(ctx, checkpoint, &corpus)?;
    let (small, large) = tasks_for(ctx, &corpus, &sparse_cfg);
    let tasks = vec![("small_n".to_string(), small.clone()), ("large_n".to_string(), large)];

    // The dense twin cannot start from the sparse checkpoint, so it gets
    // its own pre-training run with the same recipe.
    let dense_cfg = dense_twin(&sparse_cfg);
    let dense_out = trainer::train(&dense_cfg, &ctx.tc, &corpus, ctx.seed)?;
    let (dm, dv) = dense_out.optimizer.moments();
    let dense_moments = (dm.to_vec(), dv.to_vec(), dense_out.optimizer.step_count);

    let p = &ctx.study;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let arms: [(&str, &ModelConfig, &Params, Option<(&[Tensor], &[Tensor], usize)>); 2] = [
        (
            "sparse",
            &sparse_cfg,
            &sparse_start,
            sparse_moments.as_ref().map(|(m, v, t)| (m.as_slice(), v.as_slice(), *t)),
        ),
        (
            "dense",
            &dense_cfg,
            &dense_out.params,
            Some((dense_moments.0.as_slice(), dense_moments.1.as_slice(), dense_moments.2)),
        ),
    ];
    for (arm, cfg, start, moments) in arms {
        let grid = finetune_grid(
            cfg,
            start,
            moments,
            &ctx.tc,
            &tasks,
            &p.batch_list,
            &p.lr_list,
            ctx.seed,
            ctx.threads,
        )?;
        for r in &grid {
            rows.push(vec![
                arm.to_string(),
                r.task.clone(),
                r.batch_tokens.to_string(),
                fmt_f64(r.peak_lr),
                r.reset_optimizer.to_string(),
                fmt_f64(r.final_train_acc),
                fmt_f64(r.peak_heldout_acc),
                r.diverged.to_string(),
            ]);
        }
    }
    write_csv(
        &ctx.out_dir.join("finetune_grid.csv"),
        &[
            "model",
            "task",
            "batch_tokens",
            "peak_lr",
            "reset_optimizer",
            "final_train_acc",
            "peak_heldout_acc",
            "diverged",
        ],
        &rows,
    )?;

    // Overfitting curve for one representative setting.
    let curve = trainer::finetune(
        &sparse_cfg,
        sparse_start,
        None,
        &ctx.tc,
        &small,
        ctx.seed,
    )?;
    write_eval_report(&ctx.out_dir.join("finetune_curve.csv"), &curve.evals)?;

    write_manifest(ctx, "finetune", &["finetune_grid.csv", "finetune_curve.csv"])?;
    println!("finetune: {} grid rows", rows.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stability(ctx: &Ctx) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let p = &ctx.study;
    let mut st = ctx.tc.clone();
    st.steps = p.steps;
    st.peak_lr = p.peak_lr;
    st.warmup_steps = p.warmup_steps;

    let mut outcomes = stability_runs(&ctx.model, &st, &Variant::ALL, &p.seeds, &corpus, ctx.threads)?;
    outcomes.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.seed.cmp(&b.seed)));
    let rows: Vec<Vec<String>> = aggregate_stability(&outcomes)
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.runs.to_string(),
                fmt_f64(r.fraction_stable),
                fmt_f64(r.mean_quality),
                fmt_f64(r.std_quality),
                fmt_f64(r.mean_avg_max_logit),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("stability.csv"),
        &["variant", "runs", "fraction_stable", "mean_quality", "std_quality", "mean_avg_max_logit"],
        &rows,
    )?;

    let pairs = zloss_ab_runs(&ctx.model, &st, &p.seeds, &corpus, ctx.threads)?;
    let pair_rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|z| {
            vec![
                z.seed.to_string(),
                z.stable_with.to_string(),
                z.stable_without.to_string(),
                fmt_f64(z.logit_with),
                fmt_f64(z.logit_without),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("zloss_pairs.csv"),
        &["seed", "stable_with", "stable_without", "logit_with", "logit_without"],
        &pair_rows,
    )?;

    write_manifest(ctx, "stability-study", &["stability.csv", "zloss_pairs.csv"])?;
    println!("stability-study: {} runs, {} z-loss pairs", outcomes.len(), pairs.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_routing_bench(ctx: &Ctx) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let p = &ctx.study;
    let rows = routing_bench(
        &ctx.model,
        &ctx.tc,
        &p.top_n_list,
        &p.cf_list,
        &corpus,
        ctx.seed,
        ctx.threads,
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.algorithm.clone(),
                fmt_f64(r.train_cf),
                fmt_f64(r.eval_cf),
                fmt_f64(r.quality),
                r.diverged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("routing_bench.csv"),
        &["algorithm", "train_cf", "eval_cf", "quality", "diverged"],
        &csv_rows,
    )?;
    write_manifest(ctx, "routing-bench", &["routing_bench.csv"])?;
    println!("routing-bench: {} cells", rows.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_drop_robustness(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let (cfg, start, _) = starting_point(ctx, checkpoint, &corpus)?;
    let (small, _) = tasks_for(ctx, &corpus, &cfg);
    let rows = drop_robustness(
        &cfg,
        &start,
        &ctx.tc,
        &small,
        &ctx.study.cf_list,
        ctx.seed,
        ctx.threads,
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.train_cf),
                fmt_f64(r.eval_cf),
                r.aux.to_string(),
                fmt_f64(r.drop_pct),
                fmt_f64(r.heldout_acc),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("drop_robustness.csv"),
        &["train_cf", "eval_cf", "aux", "drop_pct", "heldout_acc"],
        &csv_rows,
    )?;
    write_manifest(ctx, "drop-robustness", &["drop_robustness.csv"])?;
    println!("drop-robustness: {} settings", rows.len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TraceSummary {
    mean_encoder_sentinel_entropy: f64,
    mean_decoder_sentinel_entropy: f64,
    /// Qualitative pattern reported on trained routers: encoder
    /// sentinels specialize at least as hard as decoder ones.
    encoder_at_most_decoder: bool,
}

fn cmd_trace(ctx: &Ctx, checkpoint: &Option<PathBuf>, examples: usize) -> Result<ExitCode> {
    let corpus = corpus_for(ctx);
    let (cfg, params) = match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (ck.config, ck.params)
        }
        None => {
            let params = build_model(&ctx.model, mix_seed(ctx.seed, TAG_FRESH_PARAMS))?;
            (ctx.model.clone(), params)
        }
    };
    let batch = corpus.span_batch(
        mix_seed(ctx.seed, TAG_TASK ^ 2),
        0,
        examples.max(1),
        cfg.enc_len + cfg.enc_len / 2,
        ctx.tc.mean_span,
        ctx.tc.corrupt_fraction,
    )?;
    let (records, entropy) = trace_forward(&cfg, &params, &batch, ctx.seed)?;
    write_trace(&ctx.out_dir.join("trace.jsonl"), &records)?;
    let rows: Vec<Vec<String>> = entropy
        .iter()
        .map(|e| {
            vec![
                e.stack.clone(),
                e.layer.to_string(),
                fmt_f64(e.sentinel_entropy),
                fmt_f64(e.content_entropy),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("entropy.csv"),
        &["stack", "layer", "sentinel_entropy", "content_entropy"],
        &rows,
    )?;
    let mean = |stack: &str| {
        let hs: Vec<f64> = entropy
            .iter()
            .filter(|e| e.stack == stack)
            .map(|e| e.sentinel_entropy)
            .collect();
        if hs.is_empty() {
            0.0
        } else {
            hs.iter().sum::<f64>() / hs.len() as f64
        }
    };
    let summary = TraceSummary {
        mean_encoder_sentinel_entropy: mean("enc"),
        mean_decoder_sentinel_entropy: mean("dec"),
        encoder_at_most_decoder: mean("enc") <= mean("dec"),
    };
    std::fs::write(
        ctx.out_dir.join("trace_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    write_manifest(ctx, "trace", &["trace.jsonl", "entropy.csv", "trace_summary.json"])?;
    println!("trace: {} records over {} expert layers", records.len(), entropy.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_precision_demo(ctx: &Ctx) -> Result<ExitCode> {
    // Ten logits at 128 and one at 128.5: close enough to tie that the
    // bfloat16 grid (step 1.0 in that binade) erases the gap entirely.
    let mut logits = vec![128.0; 11];
    logits[0] = 128.5;
    let describe = "10x128.0 + 1x128.5";
    let exact = ops::softmax(&logits)?[0];
    let f32p = softmax_in_format(&logits, FloatFormat::float32())[0];
    let bf16 = softmax_in_format(&logits, FloatFormat::bfloat16())[0];
    let mut rows = Vec::new();
    for (format, top) in [("float64", exact), ("float32", f32p), ("bfloat16", bf16)] {
        rows.push(vec![
            format.to_string(),
            describe.to_string(),
            fmt_f64(top),
            fmt_f64(top - exact),
            fmt_f64(if exact != 0.0 { (top - exact) / exact } else { 0.0 }),
        ]);
    }
    write_csv(
        &ctx.out_dir.join("precision.csv"),
        &["format", "logits", "top_prob", "abs_delta_vs_float64", "rel_delta_vs_float64"],
        &rows,
    )?;
    write_manifest(ctx, "precision-demo", &["precision.csv"])?;
    println!("format    top_prob  abs_delta  rel_delta");
    for r in &rows {
        println!("{:9} {:9} {:10} {}", r[0], r[2], r[3], r[4]);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MeshReport<'a> {
    mesh: &'a MeshSpec,
    intensity: IntensityReport,
    step_times: Vec<StepTimeRow>,
}

#[derive(Serialize)]
struct IntensityReport {
    tokens_per_expert_batch: f64,
    hidden_dim: f64,
    experts_per_core: f64,
    flops_per_byte: f64,
}

#[derive(Serialize)]
struct StepTimeRow {
    capacity_factor: f64,
    compute_s: f64,
    memory_s: f64,
    all2all_s: f64,
    model_parallel_comm_s: f64,
    gradient_comm_s: f64,
    total_s: f64,
}

fn cmd_mesh_plan(
    ctx: &Ctx,
    cores: usize,
    experts: usize,
    data_parallel: usize,
    model_parallel: usize,
    batch_tokens: usize,
) -> Result<ExitCode> {
    let mesh = plan_mesh(cores, experts, data_parallel, model_parallel)?;
    for w in &mesh.warnings {
        eprintln!("warning: {w}");
    }
    let mut cfg = ctx.model.clone();
    cfg.router.num_experts = experts;

    let b = batch_tokens as f64 * cfg.router.train_capacity_factor / experts as f64;
    let e = mesh.experts_per_inner_row as f64;
    let intensity = IntensityReport {
        tokens_per_expert_batch: b,
        hidden_dim: cfg.d_model as f64,
        experts_per_core: e,
        flops_per_byte: operational_intensity(b, cfg.d_model as f64, e),
    };

    let profile = HardwareProfile::default();
    let mut step_times = Vec::new();
    for cf in [cfg.router.train_capacity_factor, cfg.router.eval_capacity_factor] {
        let t = step_time_estimate(&mesh, &cfg, cf, batch_tokens as f64, &profile)?;
        step_times.push(StepTimeRow {
            capacity_factor: cf,
            compute_s: t.compute_s,
            memory_s: t.memory_s,
            all2all_s: t.all2all_s,
            model_parallel_comm_s: t.model_parallel_comm_s,
            gradient_comm_s: t.gradient_comm_s,
            total_s: t.total(),
        });
    }

    let report = MeshReport { mesh: &mesh, intensity, step_times };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(ctx.out_dir.join("mesh.json"), json.clone() + "\n")?;
    let rows: Vec<Vec<String>> = report
        .step_times
        .iter()
        .map(|t| {
            vec![
                fmt_f64(t.capacity_factor),
                fmt_f64(t.compute_s),
                fmt_f64(t.memory_s),
                fmt_f64(t.all2all_s),
                fmt_f64(t.model_parallel_comm_s),
                fmt_f64(t.gradient_comm_s),
                fmt_f64(t.total_s),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("mesh_costs.csv"),
        &["capacity_factor", "compute_s", "memory_s", "all2all_s", "model_parallel_comm_s", "gradient_comm_s", "total_s"],
        &rows,
    )?;
    write_manifest(ctx, "mesh-plan", &["mesh.json", "mesh_costs.csv"])?;
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(ctx: &Ctx) -> Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    let ok = moelab::selfcheck::run_all(&mut stdout)?;
    write_manifest(ctx, "selfcheck", &[])?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
