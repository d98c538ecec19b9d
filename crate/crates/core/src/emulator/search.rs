use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{estimate_iteration, EmulatorError, EmulatorOptions, IterationEstimate, REFERENCE_MFU};
use crate::model_spec::{
    validate_config, ClusterSpec, CpMode, ModelSpec, ParallelismConfig, ResolutionBucket,
};

/// Enumeration bounds of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub tp: Vec<u32>,
    pub cp: Vec<u32>,
    pub pp: Vec<u32>,
    pub vpp: Vec<u32>,
    pub sp: Vec<bool>,
    pub zero1: Vec<bool>,
    pub micro_batches: Vec<u32>,
    pub ckpt_fractions: Vec<f64>,
    pub cp_self_attn_modes: Vec<CpMode>,
    pub cp_cross_attn_modes: Vec<CpMode>,
    pub forward_hooks: bool,
    /// Samples per iteration across all data-parallel ranks.
    pub global_batch: u32,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            tp: vec![1, 2, 4, 8],
            cp: vec![1, 2, 4, 8],
            pp: vec![1, 2, 4, 8],
            vpp: vec![1, 2],
            sp: vec![false, true],
            zero1: vec![false, true],
            micro_batches: vec![1, 2, 4, 8],
            ckpt_fractions: vec![0.0, 0.5, 1.0],
            cp_self_attn_modes: vec![CpMode::HeadWise],
            cp_cross_attn_modes: vec![CpMode::SequenceWise],
            forward_hooks: false,
            global_batch: 32,
        }
    }
}

impl SearchSpace {
    /// Only the given configuration.
    pub fn single(cfg: &ParallelismConfig, global_batch: u32) -> Self {
        Self {
            tp: vec![cfg.tp],
            cp: vec![cfg.cp],
            pp: vec![cfg.pp],
            vpp: vec![cfg.vpp],
            sp: vec![cfg.sp],
            zero1: vec![cfg.zero1],
            micro_batches: vec![cfg.micro_batches],
            ckpt_fractions: vec![cfg.ckpt_fraction],
            cp_self_attn_modes: vec![cfg.cp_self_attn_mode],
            cp_cross_attn_modes: vec![cfg.cp_cross_attn_mode],
            forward_hooks: cfg.forward_hooks,
            global_batch,
        }
    }

    fn is_empty(&self) -> bool {
        self.tp.is_empty()
            || self.cp.is_empty()
            || self.pp.is_empty()
            || self.vpp.is_empty()
            || self.sp.is_empty()
            || self.zero1.is_empty()
            || self.micro_batches.is_empty()
            || self.ckpt_fractions.is_empty()
            || self.cp_self_attn_modes.is_empty()
            || self.cp_cross_attn_modes.is_empty()
            || self.global_batch == 0
    }

    /// Divisor-consistent configurations, deduplicated and in key order.
    pub fn enumerate(&self, model: &ModelSpec, cluster: &ClusterSpec) -> Vec<ParallelismConfig> {
        let gpus = cluster.total_gpus();
        let mut out = Vec::new();
        for &tp in &self.tp {
            for &cp in &self.cp {
                for &pp in &self.pp {
                    let shards = tp * cp * pp;
                    if shards == 0 || gpus % shards != 0 {
                        continue;
                    }
                    let dp = gpus / shards;
                    if self.global_batch % dp != 0 {
                        continue;
                    }
                    let per_rank = self.global_batch / dp;
                    for &vpp in &self.vpp {
                        if vpp == 0 || (vpp > 1 && pp <= 1) {
                            continue;
                        }
                        let chunks = pp * vpp;
                        if chunks > model.layers || model.layers % chunks != 0 {
                            continue;
                        }
                        for &sp in &self.sp {
                            if sp && tp == 1 {
                                continue;
                            }
                            for &zero1 in &self.zero1 {
                                if zero1 && dp == 1 {
                                    continue;
                                }
                                for &m in &self.micro_batches {
                                    if m == 0 || per_rank % m != 0 {
                                        continue;
                                    }
                                    for &ckpt in &self.ckpt_fractions {
                                        for &self_mode in &self.cp_self_attn_modes {
                                            for &cross_mode in &self.cp_cross_attn_modes {
                                                out.push(ParallelismConfig {
                                                    tp,
                                                    sp,
                                                    cp,
                                                    cp_self_attn_mode: self_mode,
                                                    cp_cross_attn_mode: cross_mode,
                                                    pp,
                                                    vpp,
                                                    dp,
                                                    zero1,
                                                    micro_batches: m,
                                                    ckpt_fraction: ckpt,
                                                    forward_hooks: self.forward_hooks,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        // CP modes are meaningless at cp=1; keep one representative.
        for cfg in out.iter_mut().filter(|c| c.cp == 1) {
            cfg.cp_self_attn_mode = CpMode::HeadWise;
            cfg.cp_cross_attn_mode = CpMode::SequenceWise;
        }
        out.sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("total key"));
        out.dedup_by(|a, b| a.key() == b.key());
        out
    }
}

/// Partial configuration used to locate a pinned strategy in a sweep,
/// e.g. `tp=8,sp=1,zero1=1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PinSpec {
    pub tp: Option<u32>,
    pub sp: Option<bool>,
    pub cp: Option<u32>,
    pub pp: Option<u32>,
    pub vpp: Option<u32>,
    pub dp: Option<u32>,
    pub zero1: Option<bool>,
    pub micro_batches: Option<u32>,
    pub ckpt_fraction: Option<f64>,
}

impl PinSpec {
    pub fn matches(&self, cfg: &ParallelismConfig) -> bool {
        self.tp.map_or(true, |v| v == cfg.tp)
            && self.sp.map_or(true, |v| v == cfg.sp)
            && self.cp.map_or(true, |v| v == cfg.cp)
            && self.pp.map_or(true, |v| v == cfg.pp)
            && self.vpp.map_or(true, |v| v == cfg.vpp)
            && self.dp.map_or(true, |v| v == cfg.dp)
            && self.zero1.map_or(true, |v| v == cfg.zero1)
            && self.micro_batches.map_or(true, |v| v == cfg.micro_batches)
            && self
                .ckpt_fraction
                .map_or(true, |v| (v - cfg.ckpt_fraction).abs() < 1e-9)
    }
}

impl FromStr for PinSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut pin = PinSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let int = || value.parse::<u32>().map_err(|_| format!("bad value for {key}: {value:?}"));
            let flag = || match value {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                _ => Err(format!("bad flag for {key}: {value:?}")),
            };
            match key {
                "tp" => pin.tp = Some(int()?),
                "sp" => pin.sp = Some(flag()?),
                "cp" => pin.cp = Some(int()?),
                "pp" => pin.pp = Some(int()?),
                "vpp" => pin.vpp = Some(int()?),
                "dp" => pin.dp = Some(int()?),
                "zero1" => pin.zero1 = Some(flag()?),
                "mb" | "micro_batches" => pin.micro_batches = Some(int()?),
                "ckpt" | "ckpt_fraction" => {
                    pin.ckpt_fraction =
                        Some(value.parse().map_err(|_| format!("bad value for {key}: {value:?}"))?)
                }
                other => return Err(format!("unknown pin key {other:?}")),
            }
        }
        Ok(pin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub config: ParallelismConfig,
    pub estimate: IterationEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleEntry {
    pub config: ParallelismConfig,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedGap {
    pub config: ParallelismConfig,
    pub mfu: f64,
    pub best_mfu: f64,
    /// `mfu - best_mfu`, always <= 0.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub bucket: ResolutionBucket,
    pub entries: Vec<RankedEntry>,
    pub infeasible: Vec<InfeasibleEntry>,
    pub pinned: Option<PinnedGap>,
    /// Shown for scale only; never compared against.
    pub reference_mfu: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("search space is empty")]
    EmptySpace,
}

fn classify(err: &EmulatorError) -> String {
    err.to_string()
}

pub fn search_configs(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    bucket: &ResolutionBucket,
    space: &SearchSpace,
    pin: Option<&PinSpec>,
    opts: &EmulatorOptions,
) -> Result<SearchReport, SearchError> {
    if space.is_empty() {
        return Err(SearchError::EmptySpace);
    }
    let configs = space.enumerate(model, cluster);
    let outcomes: Vec<(ParallelismConfig, Result<IterationEstimate, EmulatorError>)> = configs
        .into_par_iter()
        .map(|cfg| {
            let report = validate_config(&cfg, cluster);
            let result = if report.is_valid() {
                let per_rank = space.global_batch as f64 / cfg.dp as f64;
                estimate_iteration(model, &cfg, cluster, bucket, per_rank, opts)
            } else {
                Err(EmulatorError::InvalidConfig(report.to_string()))
            };
            (cfg, result)
        })
        .collect();

    let mut entries = Vec::new();
    let mut infeasible = Vec::new();
    for (config, result) in outcomes {
        match result {
            Ok(estimate) => entries.push(RankedEntry { config, estimate }),
            Err(e) => infeasible.push(InfeasibleEntry {
                reason: classify(&e),
                config,
            }),
        }
    }
    entries.sort_by(|a, b| {
        b.estimate
            .mfu
            .partial_cmp(&a.estimate.mfu)
            .expect("finite mfu")
            .then_with(|| a.config.key().partial_cmp(&b.config.key()).expect("total key"))
    });

    let pinned = pin.and_then(|p| {
        let best = entries.first()?.estimate.mfu;
        entries.iter().find(|e| p.matches(&e.config)).map(|e| PinnedGap {
            config: e.config.clone(),
            mfu: e.estimate.mfu,
            best_mfu: best,
            gap: e.estimate.mfu - best,
        })
    });

    Ok(SearchReport {
        bucket: *bucket,
        entries,
        infeasible,
        pinned,
        reference_mfu: REFERENCE_MFU,
    })
}

impl SearchReport {
    /// Aligned text table: one row per configuration, MFU in the last column.
    pub fn render_text(&self, limit: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bucket {}  ({} tokens/sample)", self.bucket, self.bucket.tokens());
        let _ = writeln!(
            out,
            "{:>3} {:>3} {:>3} {:>3} {:>4} {:>3} {:>5} {:>3} {:>5} {:>9} {:>7} {:>9} {:>7}",
            "TP", "SP", "CP", "PP", "VPP", "DP", "ZeRO1", "MB", "CKPT", "MEM(GB)", "BUBBLE", "ITER(s)", "MFU"
        );
        for e in self.entries.iter().take(limit) {
            let c = &e.config;
            let _ = writeln!(
                out,
                "{:>3} {:>3} {:>3} {:>3} {:>4} {:>3} {:>5} {:>3} {:>5.2} {:>9.1} {:>7.3} {:>9.3} {:>6.2}%",
                c.tp,
                c.sp as u8,
                c.cp,
                c.pp,
                c.vpp,
                c.dp,
                c.zero1 as u8,
                c.micro_batches,
                c.ckpt_fraction,
                e.estimate.memory.total_gb,
                e.estimate.bubble_fraction,
                e.estimate.iteration_s,
                e.estimate.mfu * 100.0
            );
        }
        if self.entries.len() > limit {
            let _ = writeln!(out, "... {} more feasible", self.entries.len() - limit);
        }
        let _ = writeln!(out, "{} infeasible", self.infeasible.len());
        if let Some(p) = &self.pinned {
            let _ = writeln!(
                out,
                "pinned {}: MFU {:.2}% vs best {:.2}% (gap {:+.2}%)",
                p.config,
                p.mfu * 100.0,
                p.best_mfu * 100.0,
                p.gap * 100.0
            );
        }
        let _ = writeln!(out, "reference realized MFU: {:.0}%", self.reference_mfu * 100.0);
        out
    }
}
