//! Named pipes between data producers (e.g. inference servers emitting
//! latents) and training jobs.
//!
//! Consumers sharing a pipe name and a job id form one delivery group. In
//! broadcast mode every group receives each frame; within a group, frames are
//! sprayed across consumers. Per-consumer queues are bounded, so a stalled job
//! only ever holds up its own deliveries until the send deadline.

mod frame;
mod metrics;
mod pipe;
mod transfer;
mod transport;

pub use frame::{
    decode_frame, decode_prefix, encode_frame, encode_into, DType, Frame, FrameDecoder, FrameError, MAGIC, MAX_NDIM,
    MAX_NAME_LEN, MAX_PAYLOAD, VERSION,
};
pub use metrics::{GroupMetrics, Histogram, HistogramSnapshot, PipeMetrics};
pub use pipe::{
    Ack, Consumer, Mode, PipeDecl, PipeHandle, Producer, QueuePolicy, Recv, Registry, RegistryOptions, Role,
    SprayPolicy,
};
pub use transfer::{model_transfer, pipeline_recurrence, pipelined_transfer, ModeledTransfer, TransferReport};
pub use transport::{filler_frame, PeerConsumer, PeerPipe, PeersFile, TcpConsumer, TcpProducer};

#[derive(Debug, thiserror::Error)]
pub enum RpcError {
    #[error("invalid declaration: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("pipe {0} is closed")]
    Closed(String),
    #[error("backpressure timeout on pipe {pipe} at seq {seq_no}: stalled job(s) {}", jobs.join(", "))]
    BackpressureTimeout {
        pipe: String,
        jobs: Vec<String>,
        seq_no: u64,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
