//! Event-driven simulation of the (interleaved) one-forward-one-backward schedule.
//!
//! Each pipeline rank owns `vpp` model chunks; virtual stage `s` lives on rank
//! `s % pp`. Every rank executes a fixed program of forward/backward chunk
//! operations in order, and an operation starts once the rank is free and its
//! upstream dependency has finished. Transfers are free here; the emulator
//! accounts for point-to-point traffic separately.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

/// One executed chunk operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub rank: u32,
    pub pass: Pass,
    pub micro_batch: u32,
    pub chunk: u32,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSim {
    pub makespan_s: f64,
    /// Idle fraction of a rank over the makespan (all ranks carry equal work).
    pub bubble_fraction: f64,
    pub timeline: Vec<ScheduledOp>,
}

/// `(pp-1) / (vpp*m + pp - 1)`.
pub fn closed_form_bubble(pp: u32, vpp: u32, micro_batches: u32) -> f64 {
    let (p, v, m) = (pp as f64, vpp as f64, micro_batches as f64);
    (p - 1.0) / (v * m + p - 1.0)
}

/// Forward order of `(micro_batch, chunk)` pairs on every rank: micro-batches
/// in groups of `pp`, each group walked through all chunks.
fn forward_order(pp: u32, vpp: u32, m: u32) -> Vec<(u32, u32)> {
    let mut seq = Vec::with_capacity((m * vpp) as usize);
    let mut start = 0;
    while start < m {
        let end = (start + pp).min(m);
        for chunk in 0..vpp {
            for mb in start..end {
                seq.push((mb, chunk));
            }
        }
        start = end;
    }
    seq
}

#[derive(Clone, Copy)]
struct Op {
    pass: Pass,
    mb: u32,
    chunk: u32,
}

fn rank_program(rank: u32, pp: u32, vpp: u32, m: u32, extra_warmup: u32) -> Vec<Op> {
    let fwd: Vec<Op> = forward_order(pp, vpp, m)
        .into_iter()
        .map(|(mb, chunk)| Op {
            pass: Pass::Forward,
            mb,
            chunk,
        })
        .collect();
    let bwd: Vec<Op> = forward_order(pp, vpp, m)
        .into_iter()
        .map(|(mb, chunk)| Op {
            pass: Pass::Backward,
            mb,
            chunk: vpp - 1 - chunk,
        })
        .collect();
    let total = fwd.len();
    let warmup = if vpp == 1 {
        (pp - rank - 1) as usize
    } else {
        ((pp - rank - 1) * 2 + (vpp - 1) * pp) as usize
    }
    .saturating_add(extra_warmup as usize)
    .min(total);

    let mut prog = Vec::with_capacity(2 * total);
    prog.extend_from_slice(&fwd[..warmup]);
    let mut b = 0;
    for f in &fwd[warmup..] {
        prog.push(*f);
        prog.push(bwd[b]);
        b += 1;
    }
    prog.extend_from_slice(&bwd[b..]);
    prog
}

/// Simulates one iteration; `stage_fwd_s`/`stage_bwd_s` are the per-micro-batch
/// times of one rank across all of its chunks.
///
/// With interleaving and a micro-batch count that is not a multiple of `pp`
/// the standard warmup depth can deadlock; the warmup is then deepened one
/// step at a time (all forwards first is always feasible).
pub fn simulate_pipeline(
    pp: u32,
    vpp: u32,
    micro_batches: u32,
    stage_fwd_s: f64,
    stage_bwd_s: f64,
) -> PipelineSim {
    let pp = pp.max(1);
    let vpp = vpp.max(1);
    let m = micro_batches.max(1);
    for extra in 0..=m * vpp {
        if let Some(sim) = run_programs(pp, vpp, m, extra, stage_fwd_s, stage_bwd_s) {
            return sim;
        }
    }
    unreachable!("forward-first program cannot deadlock (pp={pp}, vpp={vpp}, m={m})")
}

fn run_programs(
    pp: u32,
    vpp: u32,
    m: u32,
    extra_warmup: u32,
    stage_fwd_s: f64,
    stage_bwd_s: f64,
) -> Option<PipelineSim> {
    let stages = (pp * vpp) as usize;
    let t_fwd = stage_fwd_s / vpp as f64;
    let t_bwd = stage_bwd_s / vpp as f64;

    let idx = |mb: u32, stage: usize| mb as usize * stages + stage;
    let mut fwd_done: Vec<Option<f64>> = vec![None; m as usize * stages];
    let mut bwd_done: Vec<Option<f64>> = vec![None; m as usize * stages];

    let programs: Vec<Vec<Op>> = (0..pp)
        .map(|r| rank_program(r, pp, vpp, m, extra_warmup))
        .collect();
    let mut cursor = vec![0usize; pp as usize];
    let mut free_at = vec![0.0f64; pp as usize];
    let mut timeline = Vec::with_capacity(2 * m as usize * stages);

    loop {
        let mut progressed = false;
        for rank in 0..pp as usize {
            while let Some(op) = programs[rank].get(cursor[rank]) {
                let stage = (op.chunk * pp) as usize + rank;
                let ready = match op.pass {
                    Pass::Forward => {
                        if stage == 0 {
                            Some(0.0)
                        } else {
                            fwd_done[idx(op.mb, stage - 1)]
                        }
                    }
                    Pass::Backward => {
                        let own = fwd_done[idx(op.mb, stage)];
                        if stage + 1 == stages {
                            own
                        } else {
                            match (own, bwd_done[idx(op.mb, stage + 1)]) {
                                (Some(a), Some(b)) => Some(a.max(b)),
                                _ => None,
                            }
                        }
                    }
                };
                let Some(ready) = ready else { break };
                let start = ready.max(free_at[rank]);
                let end = start
                    + match op.pass {
                        Pass::Forward => t_fwd,
                        Pass::Backward => t_bwd,
                    };
                match op.pass {
                    Pass::Forward => fwd_done[idx(op.mb, stage)] = Some(end),
                    Pass::Backward => bwd_done[idx(op.mb, stage)] = Some(end),
                }
                free_at[rank] = end;
                cursor[rank] += 1;
                progressed = true;
                timeline.push(ScheduledOp {
                    rank: rank as u32,
                    pass: op.pass,
                    micro_batch: op.mb,
                    chunk: op.chunk,
                    start_s: start,
                    end_s: end,
                });
            }
        }
        let finished = cursor
            .iter()
            .zip(&programs)
            .all(|(c, p)| *c == p.len());
        if finished {
            break;
        }
        if !progressed {
            return None;
        }
    }

    let makespan_s = free_at.iter().fold(0.0f64, |a, &b| a.max(b));
    let busy = m as f64 * (stage_fwd_s + stage_bwd_s);
    // Summed chunk times can land a rounding error below `busy`.
    let bubble_fraction = if makespan_s > 0.0 {
        ((makespan_s - busy) / makespan_s).max(0.0)
    } else {
        0.0
    };
    timeline.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then(a.start_s.partial_cmp(&b.start_s).expect("finite times"))
    });
    Some(PipelineSim {
        makespan_s,
        bubble_fraction,
        timeline,
    })
}
