use serde::{Deserialize, Serialize};

use super::GB;
use crate::model_spec::{ModelSpec, ParallelismConfig, ResolutionBucket};

/// Per-GPU memory, in GB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub params_gb: f64,
    pub grads_gb: f64,
    pub optimizer_gb: f64,
    pub activations_gb: f64,
    pub total_gb: f64,
}

/// Inputs of the activation-memory estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationModel {
    /// Bytes kept per token per layer for backward (before any sharding).
    pub bytes_per_token_per_layer: f64,
    /// Fraction of a checkpointed layer's activations still held.
    pub ckpt_residual: f64,
    pub samples_per_micro_batch: f64,
}

impl Default for ActivationModel {
    fn default() -> Self {
        Self::for_model(&ModelSpec::default())
    }
}

impl ActivationModel {
    /// `34 * hidden` bf16 bytes per token per layer, the usual estimate for a
    /// transformer layer with fused attention.
    pub fn for_model(model: &ModelSpec) -> Self {
        Self {
            bytes_per_token_per_layer: 34.0 * model.hidden_dim as f64,
            ckpt_residual: 0.1,
            samples_per_micro_batch: 1.0,
        }
    }
}

/// Layer chunks whose activations the first pipeline rank holds at peak.
pub fn in_flight_chunks(pp: u32, vpp: u32, micro_batches: u32) -> u32 {
    let (pp, vpp, m) = (pp.max(1), vpp.max(1), micro_batches.max(1));
    if vpp == 1 {
        pp.min(m)
    } else {
        ((pp - 1) * 2 + (vpp - 1) * pp + 1).min(m * vpp)
    }
}

pub fn memory_breakdown(
    model: &ModelSpec,
    cfg: &ParallelismConfig,
    bucket: &ResolutionBucket,
    act: &ActivationModel,
) -> MemoryReport {
    let model_shards = (cfg.tp.max(1) * cfg.pp.max(1)) as f64;
    let params_gb = model.param_count * model.param_bytes / model_shards / GB;
    let grads_gb = model.param_count * model.grad_bytes / model_shards / GB;
    let mut optimizer_gb = model.param_count * model.optimizer_bytes / model_shards / GB;
    if cfg.zero1 {
        optimizer_gb /= cfg.dp.max(1) as f64;
    }

    let tokens = bucket.tokens() as f64 * act.samples_per_micro_batch;
    let chunks = in_flight_chunks(cfg.pp, cfg.vpp, cfg.micro_batches) as f64;
    let layers_resident =
        chunks * model.layers as f64 / (cfg.pp.max(1) * cfg.vpp.max(1)) as f64;
    let seq_shards = if cfg.sp { cfg.tp.max(1) } else { 1 } as f64 * cfg.cp.max(1) as f64;
    let ckpt_scale = 1.0 - cfg.ckpt_fraction * (1.0 - act.ckpt_residual);
    let activations_gb =
        tokens * layers_resident * act.bytes_per_token_per_layer / seq_shards * ckpt_scale / GB;

    MemoryReport {
        params_gb,
        grads_gb,
        optimizer_gb,
        activations_gb,
        total_gb: params_gb + grads_gb + optimizer_gb + activations_gb,
    }
}
