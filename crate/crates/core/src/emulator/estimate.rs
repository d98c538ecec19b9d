use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::pipeline::simulate_pipeline;
use crate::cost_model::{
    calibrate, comm_volumes, memory_breakdown, sample_flops, ActivationModel, CommKind,
    CommOptions, CommReport, CostCoefficients, FlopsTable, MemoryReport,
};
use crate::model_spec::{
    validate_config, ClusterSpec, ModelSpec, ParallelismConfig, ResolutionBucket,
};

/// Realized MFU of the production 540P run, shown next to estimates for scale.
pub const REFERENCE_MFU: f64 = 0.32;

/// Scalar overlap efficiencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapModel {
    /// Fraction of TP collective time hidden behind GEMMs.
    pub tp_overlap_eff: f64,
    /// Parameter allgather behind the first micro-batch forward, gradient
    /// reducescatter behind the last micro-batch backward.
    pub dp_overlap: bool,
}

impl Default for OverlapModel {
    fn default() -> Self {
        Self {
            tp_overlap_eff: 0.8,
            dp_overlap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorOptions {
    pub overlap: OverlapModel,
    /// Fraction of peak attained by dense compute.
    pub kernel_efficiency: f64,
    pub activation: ActivationModel,
    pub comm: CommOptions,
    pub coefficients: CostCoefficients,
}

fn bundled_coefficients() -> CostCoefficients {
    static COEFFS: OnceLock<CostCoefficients> = OnceLock::new();
    *COEFFS.get_or_init(|| {
        calibrate(&FlopsTable::bundled())
            .expect("bundled table calibrates")
            .coefficients
    })
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        Self {
            overlap: OverlapModel::default(),
            kernel_efficiency: 0.55,
            activation: ActivationModel::default(),
            comm: CommOptions::default(),
            coefficients: bundled_coefficients(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEstimate {
    /// Busy compute time of one GPU, including recomputation.
    pub compute_s: f64,
    pub exposed_comm_s: f64,
    pub bubble_fraction: f64,
    pub iteration_s: f64,
    pub mfu: f64,
    pub memory: MemoryReport,
    /// Exposed time per collective family: tp, cp, pp, dp.
    pub exposed_breakdown: ExposedComm,
    pub comm: CommReport,
    /// Model TFLOPs of one iteration across the cluster.
    pub useful_tflops: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExposedComm {
    pub tp_s: f64,
    pub cp_s: f64,
    pub pp_s: f64,
    pub dp_s: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmulatorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("memory: {total:.1} GB per GPU exceeds {hbm:.1} GB HBM")]
    InfeasibleMemory {
        total: f64,
        hbm: f64,
        report: MemoryReport,
    },
    #[error("model inconsistency: MFU {0:.4} > 1")]
    MfuAboveOne(f64),
    #[error("inputs must be positive: {0}")]
    NonPositive(&'static str),
}

/// `useful_tflops / (iteration_s * total peak)`.
pub fn mfu(useful_tflops: f64, iteration_s: f64, cluster: &ClusterSpec) -> Result<f64, EmulatorError> {
    if !(useful_tflops > 0.0) {
        return Err(EmulatorError::NonPositive("useful_tflops"));
    }
    if !(iteration_s > 0.0) {
        return Err(EmulatorError::NonPositive("iteration_s"));
    }
    let value = useful_tflops / (iteration_s * cluster.total_peak_tflops());
    if value > 1.0 {
        return Err(EmulatorError::MfuAboveOne(value));
    }
    Ok(value)
}

/// Per-iteration time and MFU for `cfg`, with `batch_per_dp_rank` samples of
/// `bucket` split evenly over the configured micro-batches.
pub fn estimate_iteration(
    model: &ModelSpec,
    cfg: &ParallelismConfig,
    cluster: &ClusterSpec,
    bucket: &ResolutionBucket,
    batch_per_dp_rank: f64,
    opts: &EmulatorOptions,
) -> Result<IterationEstimate, EmulatorError> {
    let report = validate_config(cfg, cluster);
    if !report.is_valid() {
        return Err(EmulatorError::InvalidConfig(report.to_string()));
    }
    if !(batch_per_dp_rank > 0.0) {
        return Err(EmulatorError::NonPositive("batch_per_dp_rank"));
    }
    if !(opts.kernel_efficiency > 0.0) {
        return Err(EmulatorError::NonPositive("kernel_efficiency"));
    }

    let m = cfg.micro_batches as f64;
    let samples_per_mb = batch_per_dp_rank / m;
    let activation = ActivationModel {
        samples_per_micro_batch: samples_per_mb,
        ..opts.activation
    };
    let memory = memory_breakdown(model, cfg, bucket, &activation);
    if memory.total_gb > cluster.hbm_gb {
        return Err(EmulatorError::InfeasibleMemory {
            total: memory.total_gb,
            hbm: cluster.hbm_gb,
            report: memory,
        });
    }

    let sample_tflops = sample_flops(&opts.coefficients, bucket);
    let model_shards = (cfg.tp * cfg.cp * cfg.pp) as f64;
    let useful_gpu = sample_tflops * batch_per_dp_rank / model_shards;
    // Backward costs twice the forward; checkpointed layers replay their forward.
    let fwd_gpu = useful_gpu / 3.0;
    let recompute_gpu = cfg.ckpt_fraction * fwd_gpu;
    let rate = cluster.peak_tflops_per_gpu * opts.kernel_efficiency;
    let stage_fwd_s = fwd_gpu / m / rate;
    let stage_bwd_s = (useful_gpu - fwd_gpu + recompute_gpu) / m / rate;
    let compute_s = m * (stage_fwd_s + stage_bwd_s);

    let sim = simulate_pipeline(cfg.pp, cfg.vpp, cfg.micro_batches, stage_fwd_s, stage_bwd_s);

    let microbatch_tokens = bucket.tokens() as f64 * samples_per_mb;
    let comm = comm_volumes(model, cfg, cluster, bucket, microbatch_tokens, &opts.comm);
    let tp_time = comm.time_of(|k| {
        matches!(k, CommKind::TpAllreduce | CommKind::TpAllgatherReducescatter)
    });
    let cp_time = comm.time_of(|k| k == CommKind::CpAll2all);
    let pp_time = comm.time_of(|k| k == CommKind::PpP2p);
    let ag_time = comm.time_of(|k| k == CommKind::DpAllgather);
    let rs_time = comm.time_of(|k| k == CommKind::DpReducescatter);

    let tp_eff = opts.overlap.tp_overlap_eff.clamp(0.0, 1.0);
    let dp_s = if opts.overlap.dp_overlap {
        let fwd_window = if cfg.forward_hooks { 0.0 } else { stage_fwd_s };
        (ag_time - fwd_window).max(0.0) + (rs_time - stage_bwd_s).max(0.0)
    } else {
        ag_time + rs_time
    };
    let exposed = ExposedComm {
        tp_s: tp_time * (1.0 - tp_eff),
        cp_s: cp_time,
        pp_s: pp_time,
        dp_s,
    };
    let exposed_comm_s = exposed.tp_s + exposed.cp_s + exposed.pp_s + exposed.dp_s;
    let iteration_s = sim.makespan_s + exposed_comm_s;

    let useful_tflops = sample_tflops * batch_per_dp_rank * cfg.dp as f64;
    let mfu = mfu(useful_tflops, iteration_s, cluster)?;

    Ok(IterationEstimate {
        compute_s,
        exposed_comm_s,
        bubble_fraction: sim.bubble_fraction,
        iteration_s,
        mfu,
        memory,
        exposed_breakdown: exposed,
        comm,
        useful_tflops,
    })
}
