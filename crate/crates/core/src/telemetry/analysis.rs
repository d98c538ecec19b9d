use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EventBody, FaultClass, SignalName, Stage, TelemetryError, TelemetryStore};

pub const DEFAULT_STRAGGLER_K: f64 = 6.0;
pub const DEFAULT_QUORUM: usize = 2;
pub const MIN_RANKS: usize = 2;
pub const MIN_ITERATIONS: usize = 5;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerReport {
    pub stage: Stage,
    pub k: f64,
    pub iterations: usize,
    /// Median and MAD over every sample from every rank in range.
    pub global_median_s: f64,
    pub mad_s: f64,
    pub threshold_s: f64,
    pub rank_median_s: BTreeMap<u32, f64>,
    pub flagged: Vec<u32>,
}

/// Flags ranks whose median `stage` time exceeds the pooled median by more
/// than `k` median absolute deviations. `iterations` is an inclusive range.
pub fn detect_stragglers(
    store: &TelemetryStore,
    iterations: Option<(u64, u64)>,
    stage: Stage,
    k: f64,
) -> Result<StragglerReport, TelemetryError> {
    let mut per_rank: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut seen_iters = BTreeSet::new();
    for (rank, iter, st, _, dur) in store.timers() {
        if st != stage || iterations.is_some_and(|(lo, hi)| iter < lo || iter > hi) {
            continue;
        }
        per_rank.entry(rank).or_default().push(dur as f64 * 1e-9);
        seen_iters.insert(iter);
    }
    if per_rank.len() < MIN_RANKS {
        return Err(TelemetryError::InsufficientData(format!(
            "{stage} timers from {} rank(s), need at least {MIN_RANKS}",
            per_rank.len()
        )));
    }
    if seen_iters.len() < MIN_ITERATIONS {
        return Err(TelemetryError::InsufficientData(format!(
            "{stage} timers over {} iteration(s), need at least {MIN_ITERATIONS}",
            seen_iters.len()
        )));
    }
    let mut pooled: Vec<f64> = per_rank.values().flatten().copied().collect();
    let global_median_s = median(&mut pooled);
    let mut dev: Vec<f64> = pooled.iter().map(|x| (x - global_median_s).abs()).collect();
    let mad_s = median(&mut dev);
    let threshold_s = global_median_s + k * mad_s;
    let rank_median_s: BTreeMap<u32, f64> = per_rank
        .into_iter()
        .map(|(r, mut xs)| (r, median(&mut xs)))
        .collect();
    let flagged = rank_median_s
        .iter()
        .filter(|(_, &m)| m > threshold_s)
        .map(|(&r, _)| r)
        .collect();
    Ok(StragglerReport {
        stage,
        k,
        iterations: seen_iters.len(),
        global_median_s,
        mad_s,
        threshold_s,
        rank_median_s,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTime {
    pub iterations: usize,
    /// Sum over iterations of the slowest rank's total timed work.
    pub iteration_s: f64,
    /// Last event end minus first event start.
    pub span_s: f64,
    pub fraction: f64,
}

pub fn effective_training_time(store: &TelemetryStore) -> Result<EffectiveTime, TelemetryError> {
    let mut per_iter_rank: BTreeMap<(u64, u32), u64> = BTreeMap::new();
    for (rank, iter, _, _, dur) in store.timers() {
        *per_iter_rank.entry((iter, rank)).or_default() += dur;
    }
    if per_iter_rank.is_empty() {
        return Err(TelemetryError::InsufficientData("no timer events".into()));
    }
    let mut per_iter: BTreeMap<u64, u64> = BTreeMap::new();
    for ((iter, _), total) in per_iter_rank {
        let e = per_iter.entry(iter).or_default();
        *e = (*e).max(total);
    }
    let start = store.events().map(|(_, e)| e.wall_ns).min().expect("non-empty");
    let end = store.events().map(|(_, e)| e.end_ns()).max().expect("non-empty");
    let span_ns = end.saturating_sub(start);
    if span_ns == 0 {
        return Err(TelemetryError::ZeroSpan);
    }
    let busy_ns: u64 = per_iter.values().sum();
    Ok(EffectiveTime {
        iterations: per_iter.len(),
        iteration_s: busy_ns as f64 * 1e-9,
        span_s: span_ns as f64 * 1e-9,
        fraction: busy_ns as f64 / span_ns as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Restart,
    Continue,
}

/// Restart once at least `quorum` distinct signals are active.
pub fn restart_decision(active: &BTreeSet<SignalName>, quorum: usize) -> Result<Decision, TelemetryError> {
    if quorum == 0 {
        return Err(TelemetryError::BadQuorum);
    }
    Ok(if active.len() >= quorum {
        Decision::Restart
    } else {
        Decision::Continue
    })
}

/// Applies the quorum to the latest reported state of each signal.
pub fn restart_decision_from_store(
    store: &TelemetryStore,
    quorum: usize,
) -> Result<(BTreeSet<SignalName>, Decision), TelemetryError> {
    let mut latest: BTreeMap<SignalName, (u64, bool)> = BTreeMap::new();
    for (_, e) in store.events() {
        if let EventBody::Signal { signal_name, active } = e.body {
            let slot = latest.entry(signal_name).or_insert((e.wall_ns, active));
            if e.wall_ns >= slot.0 {
                *slot = (e.wall_ns, active);
            }
        }
    }
    let active: BTreeSet<SignalName> = latest.into_iter().filter(|(_, (_, a))| *a).map(|(s, _)| s).collect();
    let d = restart_decision(&active, quorum)?;
    Ok((active, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub faults: u64,
    pub fatal_fraction: f64,
    pub non_fatal_fraction: f64,
    pub transient_fraction: f64,
}

pub fn failure_stats(store: &TelemetryStore) -> Result<FailureStats, TelemetryError> {
    let (mut n, mut fatal, mut transient) = (0u64, 0u64, 0u64);
    for (_, e) in store.events() {
        if let EventBody::Fault { fault_class, transient: t } = e.body {
            n += 1;
            fatal += (fault_class == FaultClass::Fatal) as u64;
            transient += t as u64;
        }
    }
    if n == 0 {
        return Err(TelemetryError::NoFaults);
    }
    let frac = |x: u64| x as f64 / n as f64;
    Ok(FailureStats {
        faults: n,
        fatal_fraction: frac(fatal),
        non_fatal_fraction: frac(n - fatal),
        transient_fraction: frac(transient),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDistribution {
    pub samples: u64,
    pub per_source: BTreeMap<String, u64>,
    /// Sample ids seen more than once, with their occurrence counts.
    pub duplicates: BTreeMap<String, u64>,
}

pub fn data_distribution(store: &TelemetryStore) -> DataDistribution {
    let mut out = DataDistribution::default();
    let mut ids: BTreeMap<String, u64> = BTreeMap::new();
    for (_, e) in store.events() {
        if let EventBody::Data { sample_meta } = &e.body {
            out.samples += 1;
            *out.per_source.entry(sample_meta.source_url.clone()).or_default() += 1;
            *ids.entry(sample_meta.id.clone()).or_default() += 1;
        }
    }
    out.duplicates = ids.into_iter().filter(|(_, c)| *c > 1).collect();
    out
}
