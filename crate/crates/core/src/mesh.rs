//! Device-mesh planning and a first-order step-time model.
//!
//! The planner answers one question: given a core count and an expert
//! count, how should the device grid be factored so that expert layers
//! shard cleanly? The cost model then prices a training step as
//! overlapped compute/memory plus three separated communication terms,
//! so the marginal cost of each axis is visible rather than folded into
//! a single number. Everything here is analytical; nothing is actually
//! distributed.

use crate::model::{flop_report, param_count, ModelConfig};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("cores must be positive")]
    NoCores,
    #[error("num_experts must be positive")]
    NoExperts,
    #[error(
        "data_parallel {data_parallel} x model_parallel {model_parallel} != {cores} cores; \
         valid (data, model) splits: {valid:?}"
    )]
    BadFactorization {
        cores: usize,
        data_parallel: usize,
        model_parallel: usize,
        valid: Vec<(usize, usize)>,
    },
    #[error(
        "data axis {data} cannot split into outer x inner with inner = {experts} experts; \
         valid inner sizes: {valid:?}"
    )]
    IndivisibleExperts {
        data: usize,
        experts: usize,
        valid: Vec<usize>,
    },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
}

/// Grid factorization of the cores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeshShape {
    /// data x model: experts shard over the data rows.
    TwoD { data: usize, model: usize },
    /// outer x inner x model: one expert per inner row, replicated over
    /// the outer axis. Used when there are fewer experts than data rows.
    ThreeD { outer: usize, inner: usize, model: usize },
}

impl MeshShape {
    pub fn data_parallel(&self) -> usize {
        match *self {
            MeshShape::TwoD { data, .. } => data,
            MeshShape::ThreeD { outer, inner, .. } => outer * inner,
        }
    }

    pub fn model_parallel(&self) -> usize {
        match *self {
            MeshShape::TwoD { model, .. } | MeshShape::ThreeD { model, .. } => model,
        }
    }

    pub fn cores(&self) -> usize {
        self.data_parallel() * self.model_parallel()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshSpec {
    pub cores: usize,
    pub shape: MeshShape,
    /// Experts living on each row of the expert-sharded data axis.
    pub experts_per_inner_row: usize,
    pub warnings: Vec<String>,
}

fn factor_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..=n)
        .filter(|d| n % d == 0)
        .map(|d| (d, n / d))
        .collect()
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Plans a device grid.
///
/// With at least as many experts as data rows the grid stays
/// two-dimensional and each row holds `num_experts / data_parallel`
/// experts. With fewer experts the data axis factors into outer x inner,
/// inner equal to the expert count (which must divide the data axis),
/// one expert per inner row.
///
/// More than one expert per core is legal but flagged: expert compute
/// serializes on the shared core, so the plan carries a warning instead
/// of an error.
pub fn plan_mesh(
    cores: usize,
    num_experts: usize,
    data_parallel: usize,
    model_parallel: usize,
) -> Result<MeshSpec, MeshError> {
    if cores == 0 {
        return Err(MeshError::NoCores);
    }
    if num_experts == 0 {
        return Err(MeshError::NoExperts);
    }
    if data_parallel == 0
        || model_parallel == 0
        || data_parallel * model_parallel != cores
    {
        return Err(MeshError::BadFactorization {
            cores,
            data_parallel,
            model_parallel,
            valid: factor_pairs(cores),
        });
    }
    let data = data_parallel;
    let mut warnings = Vec::new();

    if num_experts >= data {
        if num_experts % data != 0 {
            warnings.push(format!(
                "{num_experts} experts do not divide evenly over {data} data rows; \
                 row loads will be uneven"
            ));
        }
        let per_row = (num_experts as f64 / data as f64).ceil() as usize;
        if per_row > 1 {
            warnings.push(format!(
                "{per_row} experts per data row serialize on shared cores; \
                 one expert per core needs data_parallel >= {num_experts}"
            ));
        }
        return Ok(MeshSpec {
            cores,
            shape: MeshShape::TwoD {
                data,
                model: model_parallel,
            },
            experts_per_inner_row: per_row,
            warnings,
        });
    }

    if data % num_experts != 0 {
        return Err(MeshError::IndivisibleExperts {
            data,
            experts: num_experts,
            valid: divisors(data),
        });
    }
    let inner = num_experts;
    let outer = data / inner;
    Ok(MeshSpec {
        cores,
        shape: MeshShape::ThreeD {
            outer,
            inner,
            model: model_parallel,
        },
        experts_per_inner_row: 1,
        warnings,
    })
}

/// FLOPs per byte moved for the first expert matmul: a b x h activation
/// block against each local expert's h x wide weights reads b*h
/// activations and h*e-proportional weights per b*h-proportional FLOPs,
/// giving b*h / (b + h*e). Large e starves the cores; large b feeds
/// them.
pub fn operational_intensity(b: f64, h: f64, e: f64) -> f64 {
    (b * h) / (b + h * e)
}

/// One priced communication pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommOp {
    /// Token dispatch or return for expert layers.
    AllToAll,
    /// Activation reductions along the model-parallel axis.
    ModelParallelAllReduce { activation_scalars: f64 },
    /// Gradient synchronization along the data-parallel axis.
    GradientAllReduce { param_count: f64 },
}

/// Bytes a single device moves for `op` in one step.
///
/// All-to-all volume is the routed activations themselves:
/// batch_tokens * capacity_factor * d_model scalars. It does not depend
/// on the number of experts; more experts just means smaller per-expert
/// slices of the same buffer. Gradient all-reduce scales with parameter
/// count only: the summed gradient has the same shape no matter how many
/// tokens produced it. Ring all-reduce moves 2*(n-1)/n of the payload
/// per device.
pub fn comm_cost(
    op: CommOp,
    batch_tokens: f64,
    d_model: f64,
    capacity_factor: f64,
    devices: f64,
    bytes_per_scalar: f64,
) -> f64 {
    match op {
        CommOp::AllToAll => batch_tokens * capacity_factor * d_model * bytes_per_scalar,
        CommOp::ModelParallelAllReduce { activation_scalars } => {
            ring_factor(devices) * activation_scalars * bytes_per_scalar
        }
        CommOp::GradientAllReduce { param_count } => {
            ring_factor(devices) * param_count * bytes_per_scalar
        }
    }
}

fn ring_factor(devices: f64) -> f64 {
    if devices <= 1.0 {
        0.0
    } else {
        2.0 * (devices - 1.0) / devices
    }
}

/// Per-device throughput assumptions. Defaults approximate one lane of a
/// contemporary accelerator pod; only the ratios matter for ordering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardwareProfile {
    pub flops_per_s: f64,
    pub hbm_bytes_per_s: f64,
    pub all2all_bytes_per_s: f64,
    pub allreduce_bytes_per_s: f64,
    pub bytes_per_scalar: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            flops_per_s: 2.0e14,
            hbm_bytes_per_s: 1.2e12,
            all2all_bytes_per_s: 5.0e10,
            allreduce_bytes_per_s: 1.0e11,
            bytes_per_scalar: 4.0,
        }
    }
}

/// Step-time estimate with the communication terms kept separate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTimeBreakdown {
    pub compute_s: f64,
    pub memory_s: f64,
    pub all2all_s: f64,
    pub model_parallel_comm_s: f64,
    pub gradient_comm_s: f64,
}

impl StepTimeBreakdown {
    /// Compute and memory overlap; communication is serialized on top.
    /// An ordering tool for configurations, not a wall-clock predictor.
    pub fn total(&self) -> f64 {
        self.compute_s.max(self.memory_s)
            + self.all2all_s
            + self.model_parallel_comm_s
            + self.gradient_comm_s
    }
}

/// First-order step time for one device of the mesh.
///
/// Compute is forward+backward matmul FLOPs (backward priced at twice
/// forward) for this device's share of the batch; memory is one sweep of
/// the device's parameter shard; all-to-all covers dispatch and return
/// for each expert layer; gradient all-reduce moves the full parameter
/// gradient over the data axis regardless of batch size. Zero bandwidths
/// price their term as infinite rather than panicking.
pub fn step_time_estimate(
    mesh: &MeshSpec,
    config: &ModelConfig,
    capacity_factor: f64,
    batch_tokens: f64,
    profile: &HardwareProfile,
) -> Result<StepTimeBreakdown, MeshError> {
    if batch_tokens <= 0.0 {
        return Err(MeshError::NonPositive {
            field: "batch_tokens",
        });
    }
    if capacity_factor <= 0.0 {
        return Err(MeshError::NonPositive {
            field: "capacity_factor",
        });
    }
    let data = mesh.shape.data_parallel() as f64;
    let model = mesh.shape.model_parallel() as f64;
    let report = flop_report(config);
    let enc = config.enc_len as f64;
    let dec = config.dec_len as f64;
    let tokens_here = batch_tokens / data;
    let examples_here = tokens_here / (enc + dec);
    let param_scalars = param_count(config) as f64;

    let step_flops =
        3.0 * report.per_example(config.enc_len, config.dec_len) * examples_here / model;
    let shard_scalars = param_scalars / (data * model);

    let expert_layers = {
        let stride = config.sparse_stride();
        2 * (config.num_layers / stride)
    };
    let a2a_bytes = expert_layers as f64
        * 2.0
        * comm_cost(
            CommOp::AllToAll,
            tokens_here,
            config.d_model as f64,
            capacity_factor,
            data,
            profile.bytes_per_scalar,
        );
    let mp_bytes = if model > 1.0 {
        let activation_scalars =
            tokens_here * config.d_model as f64 * (2 * config.num_layers) as f64;
        comm_cost(
            CommOp::ModelParallelAllReduce { activation_scalars },
            tokens_here,
            config.d_model as f64,
            capacity_factor,
            model,
            profile.bytes_per_scalar,
        )
    } else {
        0.0
    };
    let grad_bytes = comm_cost(
        CommOp::GradientAllReduce {
            param_count: param_scalars / model,
        },
        tokens_here,
        config.d_model as f64,
        capacity_factor,
        data,
        profile.bytes_per_scalar,
    );

    let div = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    Ok(StepTimeBreakdown {
        compute_s: div(step_flops, profile.flops_per_s),
        memory_s: div(
            shard_scalars * profile.bytes_per_scalar,
            profile.hbm_bytes_per_s,
        ),
        all2all_s: div(a2a_bytes, profile.all2all_bytes_per_s),
        model_parallel_comm_s: div(mp_bytes, profile.allreduce_bytes_per_s),
        gradient_comm_s: div(grad_bytes, profile.allreduce_bytes_per_s),
    })
}
