//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes plain arguments and returns a JSON string; errors become
//! thrown JS exceptions. The `*_json` functions hold the logic so they can be
//! tested natively.

use ditforge_core::cost_model::{calibrate, FlopsTable};
use ditforge_core::emulator::{closed_form_bubble, simulate_pipeline, PipelineSim};
use ditforge_core::load_balancer::{coarse_batch_sizes, greedy_pad, PadResult, ResolutionBatchSize};
use ditforge_core::model_spec::BucketRequest;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Keeps the timeline small enough to draw.
const MAX_PP: u32 = 16;
const MAX_VPP: u32 = 4;
const MAX_MICRO_BATCHES: u32 = 64;
const MAX_PAD_IMAGES: u64 = 10_000;

#[derive(Serialize)]
struct Timeline {
    #[serde(flatten)]
    sim: PipelineSim,
    closed_form_bubble: f64,
}

#[derive(Serialize)]
struct Padding {
    target: String,
    batch_sizes: Vec<ResolutionBatchSize>,
    padding: PadResult,
    max_load: f64,
}

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn table_or_bundled(table_json: &str) -> Result<FlopsTable, String> {
    if table_json.trim().is_empty() {
        return Ok(FlopsTable::bundled());
    }
    serde_json::from_str(table_json).map_err(|e| format!("bad FLOPs table: {e}"))
}

pub fn pipeline_timeline_json(pp: u32, vpp: u32, micro_batches: u32, fwd_s: f64, bwd_s: f64) -> Result<String, String> {
    if !(1..=MAX_PP).contains(&pp) || !(1..=MAX_VPP).contains(&vpp) || !(1..=MAX_MICRO_BATCHES).contains(&micro_batches)
    {
        return Err(format!(
            "need 1 <= pp <= {MAX_PP}, 1 <= vpp <= {MAX_VPP}, 1 <= micro-batches <= {MAX_MICRO_BATCHES}"
        ));
    }
    if !(fwd_s > 0.0 && bwd_s > 0.0) {
        return Err("stage times must be positive".into());
    }
    to_json(&Timeline {
        sim: simulate_pipeline(pp, vpp, micro_batches, fwd_s, bwd_s),
        closed_form_bubble: closed_form_bubble(pp, vpp, micro_batches),
    })
}

/// Batch sizes for every table resolution at `target`, then greedy image
/// padding of `video_tflops` (one entry per video batch).
pub fn padding_json(
    table_json: &str,
    target: &str,
    alpha: f64,
    video_tflops: &[f64],
    images: u64,
) -> Result<String, String> {
    let table = table_or_bundled(table_json)?;
    let request: BucketRequest = target.parse().map_err(|e| format!("{e}"))?;
    let batch_sizes = coarse_batch_sizes(&table, request, alpha).map_err(|e| e.to_string())?;
    if images > MAX_PAD_IMAGES {
        return Err(format!("at most {MAX_PAD_IMAGES} images"));
    }
    if video_tflops.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err("video batch FLOPs must be finite and non-negative".into());
    }
    let image_flops = table
        .rows
        .iter()
        .find(|r| r.frames == 1)
        .map(|r| r.tflops)
        .ok_or("table has no single-frame (image) row")?;
    let padding = greedy_pad(video_tflops, images, image_flops);
    to_json(&Padding {
        target: request.to_string(),
        batch_sizes,
        max_load: padding.max_load(),
        padding,
    })
}

pub fn calibrate_json(table_json: &str) -> Result<String, String> {
    let table = table_or_bundled(table_json)?;
    to_json(&calibrate(&table).map_err(|e| e.to_string())?)
}

pub fn bundled_table_json() -> String {
    to_json(&FlopsTable::bundled()).expect("table serializes")
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pipelineTimeline)]
pub fn pipeline_timeline(pp: u32, vpp: u32, micro_batches: u32, fwd_s: f64, bwd_s: f64) -> Result<String, JsValue> {
    js(pipeline_timeline_json(pp, vpp, micro_batches, fwd_s, bwd_s))
}

#[wasm_bindgen(js_name = padBatches)]
pub fn pad_batches(table_json: &str, target: &str, alpha: f64, video_tflops: Vec<f64>, images: u64) -> Result<String, JsValue> {
    js(padding_json(table_json, target, alpha, &video_tflops, images))
}

#[wasm_bindgen(js_name = fitFlops)]
pub fn fit_flops(table_json: &str) -> Result<String, JsValue> {
    js(calibrate_json(table_json))
}

#[wasm_bindgen(js_name = bundledTable)]
pub fn bundled_table() -> String {
    bundled_table_json()
}
