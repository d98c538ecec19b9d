//! Per-iteration time and MFU estimates built from the cost models, a
//! pipeline-schedule simulator, and an exhaustive parallelism sweep.

mod estimate;
mod pipeline;
mod search;

pub use estimate::{
    estimate_iteration, mfu, EmulatorError, EmulatorOptions, ExposedComm, IterationEstimate,
    OverlapModel, REFERENCE_MFU,
};
pub use pipeline::{closed_form_bubble, simulate_pipeline, Pass, PipelineSim, ScheduledOp};
pub use search::{
    search_configs, InfeasibleEntry, PinSpec, PinnedGap, RankedEntry, SearchError, SearchReport,
    SearchSpace,
};
