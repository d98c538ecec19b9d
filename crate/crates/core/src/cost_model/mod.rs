//! Analytic cost models: per-sample FLOPs, per-GPU memory, and collective volumes.

mod comm;
mod flops;
mod lstsq;
mod memory;

pub use comm::{
    comm_volumes, cp_bytes_per_block, dp_bytes_per_rank, tp_bytes_per_layer, vae_halo,
    CommEntry, CommKind, CommOptions, CommReport, VaeHaloReport, VaeSpec,
};
pub use flops::{
    calibrate, fit_coefficients, latent_frames_for, sample_flops, sample_flops_raw, Calibration,
    CalibrationError, CostCoefficients, FlopsRow, FlopsTable, RowResidual, K_RANGE,
};
pub use memory::{in_flight_chunks, memory_breakdown, ActivationModel, MemoryReport};

/// Bytes per gigabyte (decimal).
pub const GB: f64 = 1e9;
