//! Hybrid-grained data-parallel load balance.
//!
//! Coarse stage: per-resolution batch sizes `B_r = floor(F_target / (alpha * F_r))`
//! so every batch carries roughly the FLOPs of one target-resolution sample.
//! Fine stage: cached video batches are topped up with images, one image at a
//! time to the currently lightest batch.

mod bucket;
mod coarse;
mod pad;
mod planner;

pub use bucket::{bucketize, Aspect, BucketConfig, BucketError, Clip};
pub use coarse::{coarse_batch_sizes, solve_alpha, ResolutionBatchSize};
pub use pad::{brute_force_pad, greedy_pad, image_budget, PadResult, PaddedBatch, BRUTE_FORCE_MAX_BATCHES, BRUTE_FORCE_MAX_IMAGES};
pub use planner::{BalancerConfig, BatchPlan, ManifestRecord, PlannedBatch, Planner, ResolutionPlan};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BalanceError {
    #[error("alpha too large: batch size for resolution {resolution} is 0 (F_r = {tflops:.2} TFLOPs, F_target = {target:.2} TFLOPs, alpha = {alpha})")]
    AlphaTooLarge {
        resolution: String,
        tflops: f64,
        target: f64,
        alpha: f64,
    },
    #[error("alpha must be > 0, got {0}")]
    BadAlpha(f64),
    #[error("target bucket {0} not present in FLOPs table")]
    MissingTarget(String),
    #[error("global batch {global_batch} is below the number of resolutions {resolutions}")]
    GlobalBatchTooSmall { global_batch: u64, resolutions: usize },
    #[error("global batch {0} unreachable for any alpha")]
    Unreachable(u64),
    #[error("weights must match table rows ({rows}), got {weights}")]
    WeightMismatch { rows: usize, weights: usize },
    #[error("brute-force instance too large: {batches} batches x {images} images (limit {max_batches} x {max_images})")]
    TooLarge {
        batches: usize,
        images: u64,
        max_batches: usize,
        max_images: u64,
    },
    #[error("beta must be >= 0, got {0}")]
    BadBeta(f64),
    #[error("manifest record {id}: {reason}")]
    BadRecord { id: String, reason: String },
}
