//! Static descriptions of the workload, the hardware and the sharding strategy.
//!
//! Every other module consumes these types. They are plain values: cheap to
//! clone, `Send + Sync`, and parsed from JSON with unknown fields rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Frame-count buckets used for variable-duration training.
pub const DEFAULT_FRAME_BUCKETS: [u32; 4] = [1, 68, 136, 204];

/// Combined spatial patch x VAE compression factor (pixels per latent cell).
pub const DEFAULT_PATCH: u32 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeError {
    #[error("no bucket configured for {frames} frames (configured: {configured:?})")]
    NoBucket { frames: u32, configured: Vec<u32> },
    #[error("{axis} of {pixels} pixels is not divisible by patch size {patch}")]
    NotDivisible {
        axis: &'static str,
        pixels: u32,
        patch: u32,
    },
    #[error("invalid bucket: {0}")]
    Invalid(String),
}

/// Architecture inputs of the modeled DiT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: u32,
    pub hidden_dim: u32,
    pub attention_heads: u32,
    pub mlp_ratio: f64,
    /// Text tokens seen by cross-attention.
    pub cross_attention_prompt_len: u32,
    pub param_count: f64,
    pub param_bytes: f64,
    pub grad_bytes: f64,
    /// Optimizer state bytes per parameter (fp32 master + two Adam moments = 12).
    pub optimizer_bytes: f64,
}

impl Default for ModelSpec {
    /// A 30B-parameter, 48-layer DiT with 48 heads of width 128.
    fn default() -> Self {
        Self {
            layers: 48,
            hidden_dim: 6144,
            attention_heads: 48,
            mlp_ratio: 4.0,
            cross_attention_prompt_len: 320,
            param_count: 30e9,
            param_bytes: 2.0,
            grad_bytes: 4.0,
            optimizer_bytes: 12.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.layers == 0 {
            issues.push("layers must be > 0".to_string());
        }
        if self.hidden_dim == 0 {
            issues.push("hidden_dim must be > 0".to_string());
        }
        if self.attention_heads == 0 {
            issues.push("attention_heads must be > 0".to_string());
        } else if self.hidden_dim % self.attention_heads != 0 {
            issues.push(format!(
                "hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.cross_attention_prompt_len == 0 {
            issues.push("cross_attention_prompt_len must be > 0".to_string());
        }
        for (name, v) in [
            ("mlp_ratio", self.mlp_ratio),
            ("param_count", self.param_count),
            ("param_bytes", self.param_bytes),
            ("grad_bytes", self.grad_bytes),
            ("optimizer_bytes", self.optimizer_bytes),
        ] {
            if !(v > 0.0) {
                issues.push(format!("{name} must be > 0"));
            }
        }
        issues
    }
}

/// A frame/pixel shape together with the latent grid it maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionBucket {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub latent_frames: u32,
    pub latent_height: u32,
    pub latent_width: u32,
}

impl ResolutionBucket {
    /// Tokens in one sample's latent sequence.
    pub fn tokens(&self) -> u64 {
        self.latent_frames as u64 * self.latent_height as u64 * self.latent_width as u64
    }

    /// Pixel area relative to 256x256.
    pub fn area_ratio(&self) -> f64 {
        (self.height as f64 * self.width as f64) / (256.0 * 256.0)
    }

    pub fn request(&self) -> BucketRequest {
        BucketRequest {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    pub fn check(&self) -> Result<(), ShapeError> {
        if self.frames == 0 || self.latent_frames == 0 {
            return Err(ShapeError::Invalid("frames and latent_frames must be >= 1".into()));
        }
        if self.latent_frames > self.frames {
            return Err(ShapeError::Invalid(format!(
                "latent_frames {} exceeds frames {}",
                self.latent_frames, self.frames
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ResolutionBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

/// Requested clip shape `FRAMESxHEIGHTxWIDTH`, before latent mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketRequest {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
}

impl BucketRequest {
    pub fn new(frames: u32, height: u32, width: u32) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }
}

impl fmt::Display for BucketRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

impl FromStr for BucketRequest {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        let bad = || ShapeError::Invalid(format!("expected FRAMESxHEIGHTxWIDTH, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Result<Vec<u32>, _> = parts.iter().map(|p| p.parse::<u32>()).collect();
        let nums = nums.map_err(|_| bad())?;
        if nums.iter().any(|&n| n == 0) {
            return Err(bad());
        }
        Ok(Self::new(nums[0], nums[1], nums[2]))
    }
}

/// Per-bucket latent-frame counts, keyed by frame bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentTable(BTreeMap<u32, u32>);

impl Default for LatentTable {
    /// Values recovered by fitting the per-sample FLOPs table (one latent frame
    /// per image, 12 per 68 video frames).
    fn default() -> Self {
        Self::from_pairs([(1, 1), (68, 12), (136, 24), (204, 36)])
    }
}

impl LatentTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    /// Table where video buckets get `multiplier` latent frames per 68-frame unit.
    pub fn with_multiplier(multiplier: u32) -> Self {
        Self::from_pairs(
            DEFAULT_FRAME_BUCKETS
                .iter()
                .map(|&f| (f, if f == 1 { 1 } else { multiplier * (f / 68) })),
        )
    }

    pub fn buckets(&self) -> Vec<u32> {
        self.0.keys().copied().collect()
    }

    pub fn latent_frames(&self, frame_bucket: u32) -> Option<u32> {
        self.0.get(&frame_bucket).copied()
    }

    /// Largest configured bucket that does not exceed `frames`.
    pub fn bucket_for(&self, frames: u32) -> Option<u32> {
        self.0.range(..=frames).next_back().map(|(&k, _)| k)
    }
}

/// Maps a requested clip shape onto its bucket and latent grid.
///
/// The frame count must be exactly a configured bucket; use
/// [`LatentTable::bucket_for`] first for arbitrary clip lengths.
pub fn derive_latent_shape(
    request: BucketRequest,
    latent_table: &LatentTable,
    patch: u32,
) -> Result<ResolutionBucket, ShapeError> {
    let latent_frames =
        latent_table
            .latent_frames(request.frames)
            .ok_or_else(|| ShapeError::NoBucket {
                frames: request.frames,
                configured: latent_table.buckets(),
            })?;
    if patch == 0 {
        return Err(ShapeError::Invalid("patch size must be > 0".into()));
    }
    for (axis, pixels) in [("height", request.height), ("width", request.width)] {
        if pixels == 0 || pixels % patch != 0 {
            return Err(ShapeError::NotDivisible {
                axis,
                pixels,
                patch,
            });
        }
    }
    let bucket = ResolutionBucket {
        frames: request.frames,
        height: request.height,
        width: request.width,
        latent_frames,
        latent_height: request.height / patch,
        latent_width: request.width / patch,
    };
    bucket.check()?;
    Ok(bucket)
}

/// Hardware description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub peak_tflops_per_gpu: f64,
    pub hbm_gb: f64,
    /// NVLink-class bandwidth per GPU, GB/s.
    pub intra_node_bw: f64,
    /// NIC bandwidth per node, GB/s; shared evenly by the node's GPUs.
    pub inter_node_bw: f64,
}

impl Default for ClusterSpec {
    /// Four 8-GPU H800-class nodes on a 8x400 Gb/s rail-optimized fabric.
    fn default() -> Self {
        Self {
            nodes: 4,
            gpus_per_node: 8,
            peak_tflops_per_gpu: 989.0,
            hbm_gb: 80.0,
            intra_node_bw: 400.0,
            inter_node_bw: 400.0,
        }
    }
}

/// Which physical link a collective runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Intra,
    Inter,
}

impl ClusterSpec {
    pub fn total_gpus(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn total_peak_tflops(&self) -> f64 {
        self.total_gpus() as f64 * self.peak_tflops_per_gpu
    }

    /// Per-GPU bandwidth of `link` in bytes/s.
    pub fn link_bandwidth(&self, link: Link) -> f64 {
        match link {
            Link::Intra => self.intra_node_bw * 1e9,
            Link::Inter => self.inter_node_bw * 1e9 / self.gpus_per_node as f64,
        }
    }

    /// Hard errors plus soft warnings.
    pub fn validate(&self) -> (Vec<String>, Vec<String>) {
        let mut errors = Vec::new();
        let mut warnings = Vec::new();
        if self.nodes == 0 {
            errors.push("nodes must be > 0".to_string());
        }
        if self.gpus_per_node == 0 {
            errors.push("gpus_per_node must be > 0".to_string());
        }
        for (name, v) in [
            ("peak_tflops_per_gpu", self.peak_tflops_per_gpu),
            ("hbm_gb", self.hbm_gb),
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
        ] {
            if !(v > 0.0) {
                errors.push(format!("{name} must be > 0"));
            }
        }
        if self.intra_node_bw < self.inter_node_bw {
            warnings.push(format!(
                "intra_node_bw {} GB/s is below inter_node_bw {} GB/s",
                self.intra_node_bw, self.inter_node_bw
            ));
        }
        (errors, warnings)
    }
}

/// How context parallelism splits an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CpMode {
    HeadWise,
    SequenceWise,
}

impl fmt::Display for CpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CpMode::HeadWise => "head",
            CpMode::SequenceWise => "seq",
        })
    }
}

impl FromStr for CpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head" | "head-wise" => Ok(CpMode::HeadWise),
            "seq" | "sequence-wise" => Ok(CpMode::SequenceWise),
            other => Err(format!("unknown cp mode {other:?}")),
        }
    }
}

/// Sharding strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelismConfig {
    pub tp: u32,
    pub sp: bool,
    pub cp: u32,
    pub cp_self_attn_mode: CpMode,
    pub cp_cross_attn_mode: CpMode,
    pub pp: u32,
    pub vpp: u32,
    pub dp: u32,
    pub zero1: bool,
    pub micro_batches: u32,
    /// Fraction of layers with activation checkpointing.
    pub ckpt_fraction: f64,
    /// Forward hooks registered (e.g. activation-norm monitoring); they defeat
    /// forward-side DP overlap.
    pub forward_hooks: bool,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self {
            tp: 1,
            sp: false,
            cp: 1,
            cp_self_attn_mode: CpMode::HeadWise,
            cp_cross_attn_mode: CpMode::SequenceWise,
            pp: 1,
            vpp: 1,
            dp: 1,
            zero1: false,
            micro_batches: 1,
            ckpt_fraction: 0.0,
            forward_hooks: false,
        }
    }
}

/// Total order used to break MFU ties and make sweep output deterministic.
pub type ConfigKey = (u32, u32, u32, u32, u32, bool, bool, u32, u64, CpMode, CpMode, bool);

impl ParallelismConfig {
    pub fn degree_product(&self) -> u64 {
        self.tp as u64 * self.cp as u64 * self.pp as u64 * self.dp as u64
    }

    pub fn key(&self) -> ConfigKey {
        (
            self.tp,
            self.cp,
            self.pp,
            self.vpp,
            self.dp,
            self.sp,
            self.zero1,
            self.micro_batches,
            (self.ckpt_fraction * 1e6).round() as u64,
            self.cp_self_attn_mode,
            self.cp_cross_attn_mode,
            self.forward_hooks,
        )
    }

    /// Whether a group with the given rank stride and size spans more than one node.
    /// Ranks are laid out tp-innermost, then cp, pp, dp.
    fn group_link(stride: u32, degree: u32, gpus_per_node: u32) -> Link {
        if degree <= 1 || stride as u64 * degree as u64 <= gpus_per_node as u64 {
            Link::Intra
        } else {
            Link::Inter
        }
    }

    pub fn tp_link(&self, cluster: &ClusterSpec) -> Link {
        Self::group_link(1, self.tp, cluster.gpus_per_node)
    }

    pub fn cp_link(&self, cluster: &ClusterSpec) -> Link {
        Self::group_link(self.tp, self.cp, cluster.gpus_per_node)
    }

    pub fn pp_link(&self, cluster: &ClusterSpec) -> Link {
        Self::group_link(self.tp * self.cp, self.pp, cluster.gpus_per_node)
    }

    pub fn dp_link(&self, cluster: &ClusterSpec) -> Link {
        Self::group_link(self.tp * self.cp * self.pp, self.dp, cluster.gpus_per_node)
    }
}

impl fmt::Display for ParallelismConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={},sp={},cp={},pp={},vpp={},dp={},zero1={},mb={},ckpt={},cp_self={},cp_cross={}",
            self.tp,
            self.sp as u8,
            self.cp,
            self.pp,
            self.vpp,
            self.dp,
            self.zero1 as u8,
            self.micro_batches,
            self.ckpt_fraction,
            self.cp_self_attn_mode,
            self.cp_cross_attn_mode,
        )?;
        if self.forward_hooks {
            f.write_str(",hooks=1")?;
        }
        Ok(())
    }
}

/// One named violation found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }

    fn push(&mut self, code: &'static str, message: String) {
        self.diagnostics.push(Diagnostic { code: code.to_string(), message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<&str> = self.diagnostics.iter().map(|d| d.message.as_str()).collect();
        f.write_str(&msgs.join("; "))
    }
}

pub fn validate_config(cfg: &ParallelismConfig, cluster: &ClusterSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, v) in [("tp", cfg.tp), ("cp", cfg.cp), ("pp", cfg.pp), ("dp", cfg.dp)] {
        if v == 0 {
            report.push("zero_degree", format!("{name} must be >= 1"));
        }
    }
    let gpus = cluster.total_gpus() as u64;
    if cfg.degree_product() != gpus {
        report.push(
            "degree_product_mismatch",
            format!(
                "degree product mismatch: tp*cp*pp*dp = {} but cluster has {} GPUs",
                cfg.degree_product(),
                gpus
            ),
        );
    }
    if cfg.tp > cluster.gpus_per_node {
        report.push(
            "tp_exceeds_node",
            format!(
                "tp exceeds gpus_per_node: tp={} > {}",
                cfg.tp, cluster.gpus_per_node
            ),
        );
    }
    if cfg.vpp == 0 {
        report.push("vpp_zero", "vpp must be >= 1".to_string());
    } else if cfg.vpp > 1 && cfg.pp <= 1 {
        report.push(
            "vpp_without_pp",
            format!("vpp={} requires pp > 1", cfg.vpp),
        );
    }
    if cfg.micro_batches == 0 {
        report.push("micro_batches_zero", "micro_batches must be >= 1".to_string());
    }
    if !(0.0..=1.0).contains(&cfg.ckpt_fraction) {
        report.push(
            "ckpt_fraction_range",
            format!("ckpt_fraction {} outside [0, 1]", cfg.ckpt_fraction),
        );
    }
    report
}
