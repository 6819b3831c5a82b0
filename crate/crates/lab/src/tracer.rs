//! Token-level routing traces: which expert each token visited, at what
//! gate, and whether it was kept. One JSON object per line, plus a
//! per-layer entropy table that separates sentinel tokens from content.

use crate::corpus::is_sentinel;
use crate::mix_seed;
use crate::trainer::TrainError;
use moelab_core::losses::LossConfig;
use moelab_core::model::{forward_batch, EncDecBatch, ModelConfig, Params};
use moelab_core::routing::{entropy_from_counts, Phase};
use serde::Serialize;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub stack: String,
    pub layer: usize,
    pub example: usize,
    /// Sequence position of the token.
    pub pos: usize,
    pub token_id: usize,
    pub expert: usize,
    pub rank: usize,
    pub gate: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyRow {
    pub stack: String,
    pub layer: usize,
    /// Rank-1 assignment entropy of sentinel tokens, natural log.
    pub sentinel_entropy: f64,
    /// Same for everything that is not a sentinel.
    pub content_entropy: f64,
}

/// Runs one deterministic forward pass and collects every routing
/// candidate as a trace record, with per-layer assignment entropies.
pub fn trace_forward(
    cfg: &ModelConfig,
    params: &Params,
    batch: &EncDecBatch,
    seed: u64,
) -> Result<(Vec<TraceRecord>, Vec<EntropyRow>), TrainError> {
    let fp = forward_batch(
        cfg,
        params,
        batch,
        Phase::Eval,
        &LossConfig::default(),
        mix_seed(seed, 0x5452_4143),
    )?;
    let mut records = Vec::new();
    let mut counts: std::collections::BTreeMap<(String, usize), (Vec<usize>, Vec<usize>)> =
        std::collections::BTreeMap::new();
    for ev in &fp.moe_events {
        let stack = ev.stack.short().to_string();
        let slot = counts
            .entry((stack.clone(), ev.layer))
            .or_insert_with(|| {
                (vec![0; ev.decision.num_experts], vec![0; ev.decision.num_experts])
            });
        for (t, assignments) in ev.decision.assignments.iter().enumerate() {
            let token_id = ev.token_ids[t];
            if let Some(first) = assignments.first() {
                if is_sentinel(token_id) {
                    slot.0[first.expert] += 1;
                } else {
                    slot.1[first.expert] += 1;
                }
            }
            for a in assignments {
                records.push(TraceRecord {
                    stack: stack.clone(),
                    layer: ev.layer,
                    example: ev.example,
                    pos: ev.group_start + t,
                    token_id,
                    expert: a.expert,
                    rank: a.rank,
                    gate: a.gate,
                    kept: a.kept,
                });
            }
        }
    }
    let entropy = counts
        .into_iter()
        .map(|((stack, layer), (sent, content))| EntropyRow {
            stack,
            layer,
            sentinel_entropy: entropy_from_counts(&sent),
            content_entropy: entropy_from_counts(&content),
        })
        .collect();
    Ok((records, entropy))
}

/// Line-delimited JSON, one record per line.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> io::Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{sentinel_id, SynthCorpus};
    use moelab_core::model::build_model;

    fn traced_batch(cfg: &ModelConfig) -> EncDecBatch {
        let corpus = SynthCorpus::new(1);
        let mut enc_ids = Vec::new();
        let mut dec_targets = Vec::new();
        for i in 0..4 {
            let mut seq = corpus.sequence(i, cfg.enc_len - 2);
            seq.push(sentinel_id(0));
            seq.push(sentinel_id(1));
            enc_ids.push(seq);
            dec_targets.push(vec![sentinel_id(0), 5, 6, sentinel_id(1), 7]);
        }
        EncDecBatch { enc_ids, dec_targets }
    }

    #[test]
    fn trace_covers_every_expert_layer_and_is_deterministic() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 3).unwrap();
        let batch = traced_batch(&cfg);
        let (records, entropy) = trace_forward(&cfg, &params, &batch, 11).unwrap();
        let (records2, entropy2) = trace_forward(&cfg, &params, &batch, 11).unwrap();
        assert_eq!(records, records2);
        assert_eq!(entropy, entropy2);

        assert!(!records.is_empty());
        let stacks: std::collections::BTreeSet<&str> =
            records.iter().map(|r| r.stack.as_str()).collect();
        assert!(stacks.contains("enc") && stacks.contains("dec"));
        for r in &records {
            assert!(r.expert < cfg.router.num_experts);
            assert!(r.gate > 0.0 && r.gate <= 1.0);
            assert!(r.token_id < cfg.vocab_size);
        }
        // Sentinels reached the encoder, so sentinel entropy exists.
        assert!(entropy.iter().any(|e| e.stack == "enc"));
    }

    #[test]
    fn line_json_is_one_parseable_object_per_line() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 3).unwrap();
        let batch = traced_batch(&cfg);
        let (records, _) = trace_forward(&cfg, &params, &batch, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), records.len());
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["stack", "layer", "pos", "token_id", "expert", "gate", "kept"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
}
