use serde::{Deserialize, Serialize};

use crate::model_spec::{ClusterSpec, CpMode, Link, ModelSpec, ParallelismConfig, ResolutionBucket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommKind {
    TpAllreduce,
    TpAllgatherReducescatter,
    CpAll2all,
    PpP2p,
    DpReducescatter,
    DpAllgather,
    VaeHalo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommEntry {
    pub kind: CommKind,
    /// Bytes sent per GPU over one iteration.
    pub bytes: f64,
    pub link: Link,
    pub time_s: f64,
}

impl CommEntry {
    pub fn new(kind: CommKind, bytes: f64, link: Link, cluster: &ClusterSpec) -> Self {
        Self {
            kind,
            bytes,
            link,
            time_s: bytes / cluster.link_bandwidth(link),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub entries: Vec<CommEntry>,
}

impl CommReport {
    pub fn time_of(&self, pred: impl Fn(CommKind) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|e| pred(e.kind))
            .map(|e| e.time_s)
            .sum()
    }

    pub fn bytes_of(&self, pred: impl Fn(CommKind) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|e| pred(e.kind))
            .map(|e| e.bytes)
            .sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.bytes_of(|_| true)
    }

    pub fn total_time_s(&self) -> f64 {
        self.time_of(|_| true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommOptions {
    /// Bytes per activation element.
    pub dtype_bytes: f64,
    /// Tensor-parallel regions per layer (self-attention, cross-attention, MLP).
    pub tp_blocks_per_layer: u32,
}

impl Default for CommOptions {
    fn default() -> Self {
        Self {
            dtype_bytes: 2.0,
            tp_blocks_per_layer: 3,
        }
    }
}

/// Allgather + reducescatter (or the equivalent allreduce) around one TP region.
pub fn tp_bytes_per_layer(activation_bytes: f64, tp: u32) -> f64 {
    if tp <= 1 {
        return 0.0;
    }
    2.0 * (tp - 1) as f64 / tp as f64 * activation_bytes
}

/// All-to-all volume of one attention block under context parallelism.
pub fn cp_bytes_per_block(activation_bytes: f64, cp: u32) -> f64 {
    if cp <= 1 {
        return 0.0;
    }
    activation_bytes * (cp - 1) as f64 / cp as f64
}

/// Gradient reducescatter plus parameter allgather per data-parallel rank.
pub fn dp_bytes_per_rank(grad_bytes_per_rank: f64, dp: u32) -> f64 {
    if dp <= 1 {
        return 0.0;
    }
    2.0 * (dp - 1) as f64 / dp as f64 * grad_bytes_per_rank
}

/// Per-iteration, per-GPU collective volumes.
///
/// `microbatch_tokens` is the full (pre-sharding) sequence length of one
/// micro-batch; forward and backward each pay the TP, CP and PP volumes once.
pub fn comm_volumes(
    model: &ModelSpec,
    cfg: &ParallelismConfig,
    cluster: &ClusterSpec,
    bucket: &ResolutionBucket,
    microbatch_tokens: f64,
    opts: &CommOptions,
) -> CommReport {
    let tp = cfg.tp.max(1);
    let cp = cfg.cp.max(1);
    let pp = cfg.pp.max(1);
    let m = cfg.micro_batches.max(1) as f64;
    let layers_per_gpu = model.layers as f64 / pp as f64;
    let passes = 2.0 * m * layers_per_gpu;
    let act_layer = microbatch_tokens / cp as f64 * model.hidden_dim as f64 * opts.dtype_bytes;

    let mut entries = Vec::new();

    let tp_kind = if cfg.sp {
        CommKind::TpAllgatherReducescatter
    } else {
        CommKind::TpAllreduce
    };
    let tp_bytes = tp_bytes_per_layer(act_layer, tp) * opts.tp_blocks_per_layer as f64 * passes;
    entries.push(CommEntry::new(tp_kind, tp_bytes, cfg.tp_link(cluster), cluster));

    let seq_len = (bucket.tokens() as f64).max(1.0);
    let cross_scale = match cfg.cp_cross_attn_mode {
        CpMode::SequenceWise => model.cross_attention_prompt_len as f64 / seq_len,
        CpMode::HeadWise => 1.0,
    };
    let cp_block = cp_bytes_per_block(act_layer, cp);
    let cp_bytes = cp_block * (1.0 + cross_scale) * passes;
    entries.push(CommEntry::new(CommKind::CpAll2all, cp_bytes, cfg.cp_link(cluster), cluster));

    let pp_bytes = if pp > 1 {
        let seq_shard = if cfg.sp { tp as f64 } else { 1.0 };
        act_layer / seq_shard * 2.0 * m * cfg.vpp.max(1) as f64
    } else {
        0.0
    };
    entries.push(CommEntry::new(CommKind::PpP2p, pp_bytes, cfg.pp_link(cluster), cluster));

    let grad_rank = model.param_count * model.grad_bytes / (tp * pp) as f64;
    let half = dp_bytes_per_rank(grad_rank, cfg.dp) / 2.0;
    let dp_link = cfg.dp_link(cluster);
    entries.push(CommEntry::new(CommKind::DpReducescatter, half, dp_link, cluster));
    entries.push(CommEntry::new(CommKind::DpAllgather, half, dp_link, cluster));

    CommReport { entries }
}

/// Temporal-parallel VAE convolution: halo exchange versus conv compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSpec {
    /// GPUs the latent is split across along frames.
    pub split: u32,
    pub latent_frames: u32,
    pub halo_frames: u32,
    pub latent_frame_bytes: f64,
    /// Representative conv stack run per pixel frame.
    pub conv_layers: u32,
    pub conv_channels: u32,
    pub kernel: u32,
    pub pixel_height: u32,
    pub pixel_width: u32,
    /// Pixel frames per latent frame.
    pub temporal_ratio: u32,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            split: 2,
            latent_frames: 36,
            halo_frames: 1,
            latent_frame_bytes: 4e6,
            conv_layers: 8,
            conv_channels: 128,
            kernel: 3,
            pixel_height: 544,
            pixel_width: 992,
            temporal_ratio: 8,
        }
    }
}

impl VaeSpec {
    /// `2 * k^3 * C^2 * H * W` FLOPs per conv layer per pixel frame.
    pub fn conv_tflops_per_latent_frame(&self) -> f64 {
        let k3 = (self.kernel as f64).powi(3);
        let c2 = (self.conv_channels as f64).powi(2);
        let hw = self.pixel_height as f64 * self.pixel_width as f64;
        2.0 * k3 * c2 * hw * self.conv_layers as f64 * self.temporal_ratio as f64 / 1e12
    }

    pub fn assumptions(&self) -> Vec<String> {
        vec![
            format!("latent split {}-way along frames", self.split),
            format!("{} halo latent frame(s) per boundary per direction", self.halo_frames),
            format!("latent frame = {} bytes", self.latent_frame_bytes),
            format!(
                "conv stack: {} layers, {} channels, {}^3 kernel at {}x{}, {} pixel frames per latent frame",
                self.conv_layers,
                self.conv_channels,
                self.kernel,
                self.pixel_height,
                self.pixel_width,
                self.temporal_ratio
            ),
            format!(
                "conv FLOPs = {:.2} TFLOPs per latent frame",
                self.conv_tflops_per_latent_frame()
            ),
            "halo sends to both neighbours proceed concurrently; one exchange per forward".to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeHaloReport {
    pub entry: CommEntry,
    pub bytes_per_boundary_per_direction: f64,
    pub halo_time_s: f64,
    pub conv_time_s: f64,
    pub ratio: f64,
    pub assumptions: Vec<String>,
}

pub fn vae_halo(vae: &VaeSpec, cluster: &ClusterSpec, kernel_efficiency: f64) -> VaeHaloReport {
    let split = vae.split.max(1);
    let per_dir = vae.halo_frames as f64 * vae.latent_frame_bytes;
    let boundaries = (split - 1) as f64;
    // Interior ranks exchange with two neighbours.
    let neighbours = if split <= 1 {
        0.0
    } else if split == 2 {
        1.0
    } else {
        2.0
    };
    let link = if split <= cluster.gpus_per_node {
        Link::Intra
    } else {
        Link::Inter
    };
    let bw = cluster.link_bandwidth(link);
    let halo_time_s = neighbours * per_dir / bw;
    let entry = CommEntry {
        kind: CommKind::VaeHalo,
        bytes: boundaries * 2.0 * per_dir,
        link,
        time_s: halo_time_s,
    };
    let frames_per_gpu = vae.latent_frames as f64 / split as f64;
    let conv_time_s = frames_per_gpu * vae.conv_tflops_per_latent_frame()
        / (cluster.peak_tflops_per_gpu * kernel_efficiency);
    let mut assumptions = vae.assumptions();
    assumptions.push(format!(
        "conv runs at {:.0}% of {} TFLOP/s peak",
        kernel_efficiency * 100.0,
        cluster.peak_tflops_per_gpu
    ));
    VaeHaloReport {
        entry,
        bytes_per_boundary_per_direction: per_dir,
        halo_time_s,
        conv_time_s,
        ratio: if conv_time_s > 0.0 { halo_time_s / conv_time_s } else { f64::INFINITY },
        assumptions,
    }
}
