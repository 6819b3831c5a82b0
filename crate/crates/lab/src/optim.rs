//! Adaptive-moment optimizer with update-RMS clipping, the warmup +
//! inverse-square-root learning-rate schedule, and parameter-subset
//! masks for partial fine-tuning.

use moelab_core::model::{ParamKind, Params};
use moelab_core::Tensor;
use serde::{Deserialize, Serialize};

/// Which parameters a run is allowed to move. Everything outside the
/// subset keeps its bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSubset {
    All,
    /// Everything except expert weights and routers.
    NonMoe,
    /// Expert weights and routers only.
    Moe,
    Attention,
    /// Feed-forward blocks, dense and expert alike.
    Ffn,
}

impl Default for TrainableSubset {
    fn default() -> Self {
        TrainableSubset::All
    }
}

impl TrainableSubset {
    pub fn includes(self, kind: ParamKind) -> bool {
        let is_moe = matches!(kind, ParamKind::ExpertFfn | ParamKind::Router);
        match self {
            TrainableSubset::All => true,
            TrainableSubset::NonMoe => !is_moe,
            TrainableSubset::Moe => is_moe,
            TrainableSubset::Attention => kind == ParamKind::Attention,
            TrainableSubset::Ffn => {
                matches!(kind, ParamKind::DenseFfn | ParamKind::ExpertFfn)
            }
        }
    }

    pub const ALL: [TrainableSubset; 5] = [
        TrainableSubset::All,
        TrainableSubset::NonMoe,
        TrainableSubset::Moe,
        TrainableSubset::Attention,
        TrainableSubset::Ffn,
    ];
}

/// Linear warmup to the peak, then inverse-square-root decay. The two
/// branches meet at `warmup_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    /// `step` is 1-based: the first optimizer step uses lr peak/warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Adam with bias correction. `clip_update_rms` bounds the root mean
/// square of each parameter's applied delta (learning rate included), a
/// desk-scale stand-in for factored-optimizer update clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_update_rms: Option<f64>,
    pub step_count: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, schedule: Schedule, clip_update_rms: Option<f64>) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_update_rms,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores saved optimizer state (checkpoint resume).
    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step_count: usize) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }

    pub fn reset_state(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        self.step_count = 0;
    }

    /// One update. Parameters whose kind falls outside `subset` are left
    /// untouched, moments included. Returns the applied update RMS per
    /// parameter (zero for masked or empty entries).
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &[Tensor],
        subset: TrainableSubset,
    ) -> Vec<f64> {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step_count += 1;
        let lr = self.schedule.lr_at(self.step_count);
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);

        let mut applied = vec![0.0; params.len()];
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !subset.includes(entry.kind) {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = entry.tensor.data_mut();
            debug_assert_eq!(g.len(), p.len());

            let mut updates = vec![0.0; p.len()];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                updates[j] = lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let mut rms = (updates.iter().map(|u| u * u).sum::<f64>()
                / updates.len().max(1) as f64)
                .sqrt();
            if let Some(limit) = self.clip_update_rms {
                if rms > limit {
                    let scale = limit / rms;
                    updates.iter_mut().for_each(|u| *u *= scale);
                    rms = limit;
                }
            }
            for j in 0..p.len() {
                p[j] -= updates[j];
            }
            applied[i] = rms;
        }
        applied
    }
}
