//! Desk-scale building blocks for large video diffusion-transformer training:
//!
//! * [`model_spec`]: workload, cluster and sharding descriptions plus validation.
//! * [`cost_model`]: per-sample FLOPs fit, memory and communication volumes.
//! * [`emulator`]: pipeline schedule simulation, iteration/MFU estimates, config sweeps.
//! * [`load_balancer`]: mixed-resolution batch sizing, image padding, bucketization.
//! * [`pipeline_rpc`]: named pipes with spray/broadcast delivery and tensor framing over TCP.
//! * [`telemetry`]: async event spooling, ingestion, straggler and restart analysis.

pub mod cost_model;
pub mod emulator;
pub mod load_balancer;
pub mod model_spec;
pub mod pipeline_rpc;
pub mod telemetry;

mod json;

pub use json::{from_json_file, from_json_str, to_json_pretty, JsonError};
