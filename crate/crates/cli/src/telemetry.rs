use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use ditforge_core::telemetry::{
    data_distribution, detect_stragglers, effective_training_time, failure_stats, ingest, restart_decision,
    restart_decision_from_store, DataDistribution, Decision, EffectiveTime, EventRecord, FailureStats, FaultClass,
    Quarantined, Recorder, RecorderConfig, RecorderStats, SampleMeta, SignalName, Stage, StragglerReport,
    DEFAULT_QUORUM, DEFAULT_STRAGGLER_K,
};
use ditforge_core::to_json_pretty;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Subcommand)]
pub enum TelemetryCommand {
    /// Ingest a spool directory and run the requested analyses.
    Analyze(AnalyzeArgs),
    /// Write a seeded synthetic spool (one producer per rank) for rehearsals.
    Synth(SynthArgs),
}

/// Inclusive iteration window, written `A..B` (half-open) or `A..=B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRange(u64, u64);

impl std::str::FromStr for IterRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad iteration range {s:?}, expected A..B or A..=B");
        let (lo, hi, inclusive) = match s.split_once("..=") {
            Some((a, b)) => (a, b, true),
            None => {
                let (a, b) = s.split_once("..").ok_or_else(bad)?;
                (a, b, false)
            }
        };
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        let hi = if inclusive { Some(hi) } else { hi.checked_sub(1) };
        match hi {
            Some(hi) if hi >= lo => Ok(IterRange(lo, hi)),
            _ => Err(format!("empty iteration range {s:?}")),
        }
    }
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Directory of `*.events.jsonl` spool files.
    #[arg(long)]
    spool: PathBuf,
    #[arg(long)]
    stragglers: bool,
    #[arg(long, default_value = "backward")]
    stage: Stage,
    /// MAD multiplier for the straggler threshold.
    #[arg(long, default_value_t = DEFAULT_STRAGGLER_K)]
    k: f64,
    #[arg(long)]
    iterations: Option<IterRange>,
    #[arg(long)]
    effective_time: bool,
    #[arg(long)]
    data_stats: bool,
    #[arg(long)]
    failures: bool,
    /// Restart quorum over signals from the given file ({"name": bool} or ["name", ...]),
    /// or from the spool's latest signal states when no file is given.
    #[arg(long, num_args = 0..=1)]
    restart_check: Option<Option<PathBuf>>,
    #[arg(long, default_value_t = DEFAULT_QUORUM)]
    quorum: usize,
    /// Also write the per-kind event tables here.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum SignalsFile {
    States(BTreeMap<SignalName, bool>),
    Active(Vec<SignalName>),
}

impl SignalsFile {
    pub fn active(self) -> BTreeSet<SignalName> {
        match self {
            SignalsFile::States(m) => m.into_iter().filter(|(_, on)| *on).map(|(s, _)| s).collect(),
            SignalsFile::Active(v) => v.into_iter().collect(),
        }
    }
}

#[derive(Serialize)]
struct RestartCheck {
    source: String,
    active: BTreeSet<SignalName>,
    quorum: usize,
    decision: Decision,
}

#[derive(Serialize)]
struct AnalyzeReport {
    spool: String,
    events: usize,
    duplicates: u64,
    quarantined: Vec<Quarantined>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stragglers: Option<StragglerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effective_time: Option<EffectiveTime>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_stats: Option<DataDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failures: Option<FailureStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    restart: Option<RestartCheck>,
}

pub fn run(cmd: TelemetryCommand) -> anyhow::Result<()> {
    match cmd {
        TelemetryCommand::Analyze(a) => analyze(a),
        TelemetryCommand::Synth(a) => synth(a),
    }
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let store = ingest(&args.spool).with_context(|| format!("cannot read spool {}", args.spool.display()))?;
    let quarantined: Vec<Quarantined> = store.quarantine().cloned().collect();
    for q in &quarantined {
        log::warn!("quarantined {}:{}: {}", q.file, q.line, q.error);
    }
    let mut report = AnalyzeReport {
        spool: args.spool.display().to_string(),
        events: store.len(),
        duplicates: store.duplicates(),
        quarantined,
        stragglers: None,
        effective_time: None,
        data_stats: None,
        failures: None,
        restart: None,
    };
    if args.stragglers {
        let range = args.iterations.map(|r| (r.0, r.1));
        report.stragglers = Some(detect_stragglers(&store, range, args.stage, args.k)?);
    }
    if args.effective_time {
        report.effective_time = Some(effective_training_time(&store)?);
    }
    if args.data_stats {
        report.data_stats = Some(data_distribution(&store));
    }
    if args.failures {
        report.failures = Some(failure_stats(&store)?);
    }
    if let Some(file) = args.restart_check {
        let (source, active, decision) = match file {
            Some(path) => {
                let signals: SignalsFile = ditforge_core::from_json_file(&path)?;
                let active = signals.active();
                let d = restart_decision(&active, args.quorum)?;
                (path.display().to_string(), active, d)
            }
            None => {
                let (active, d) = restart_decision_from_store(&store, args.quorum)?;
                ("spool".to_string(), active, d)
            }
        };
        report.restart = Some(RestartCheck {
            source,
            active,
            quorum: args.quorum,
            decision,
        });
    }
    if let Some(path) = &args.export {
        crate::emit(Some(path), &to_json_pretty(&store.export_json()))?;
    }
    crate::emit(args.out.as_deref(), &to_json_pretty(&report))
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    ranks: u32,
    #[arg(long, default_value_t = 50)]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rank whose `--stage` time is inflated by `--slowdown`.
    #[arg(long)]
    straggler: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    slowdown: f64,
    #[arg(long, default_value = "backward")]
    stage: Stage,
    /// Uniform relative jitter on every stage time.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Data samples logged per rank per iteration.
    #[arg(long, default_value_t = 2)]
    samples: u32,
    /// Probability that a rank logs a fault in an iteration.
    #[arg(long, default_value_t = 0.0)]
    fault_rate: f64,
}

const BASE_STAGE_S: [(Stage, f64); 4] = [
    (Stage::Dataloader, 0.05),
    (Stage::Forward, 1.0),
    (Stage::Backward, 2.0),
    (Stage::Optimizer, 0.2),
];

const SOURCES: [&str; 3] = [
    "s3://clips/stock/part-0000",
    "s3://clips/web/part-0001",
    "s3://clips/film/part-0002",
];

/// Per-rank event stream of a synthetic run; stages run back to back and
/// iterations start at a shared barrier set by the slowest rank.
pub fn synth_events(args: &SynthArgs) -> Vec<Vec<EventRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = vec![Vec::new(); args.ranks as usize];
    let mut barrier_ns = 0u64;
    for it in 0..args.iterations {
        let mut slowest = 0u64;
        for rank in 0..args.ranks {
            let events = &mut out[rank as usize];
            let mut t = barrier_ns;
            for (stage, base) in BASE_STAGE_S {
                let mut s = base * (1.0 + rng.gen_range(-args.noise..=args.noise));
                if Some(rank) == args.straggler && stage == args.stage {
                    s *= 1.0 + args.slowdown;
                }
                let d = (s * 1e9).round() as u64;
                events.push(EventRecord::timer(rank, it, stage, t, d));
                t += d;
            }
            for j in 0..args.samples {
                let n = rng.gen_range(0..10_000u32);
                let meta = SampleMeta {
                    id: format!("clip-{n:05}"),
                    frames: [68, 136, 204][(j % 3) as usize],
                    height: 256,
                    width: 256,
                    source_url: SOURCES[rng.gen_range(0..SOURCES.len())].to_string(),
                };
                events.push(EventRecord::data(rank, it, barrier_ns, meta));
            }
            if args.fault_rate > 0.0 && rng.gen_bool(args.fault_rate.min(1.0)) {
                let class = if rng.gen_bool(0.5) { FaultClass::Fatal } else { FaultClass::NonFatal };
                events.push(EventRecord::fault(rank, it, t, class, rng.gen_bool(0.5)));
            }
            slowest = slowest.max(t - barrier_ns);
        }
        barrier_ns += slowest;
    }
    out
}

#[derive(Serialize)]
struct SynthSummary {
    spool: String,
    producers: BTreeMap<String, RecorderStats>,
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    if args.ranks == 0 {
        bail!("--ranks must be >= 1");
    }
    if !(args.noise >= 0.0 && args.noise < 1.0) {
        bail!("--noise must be in [0, 1)");
    }
    let streams = synth_events(&args);
    let mut producers = BTreeMap::new();
    for (rank, events) in streams.into_iter().enumerate() {
        let stats = record_stream(&args.out, &format!("rank{rank:04}"), events)?;
        producers.insert(format!("rank{rank:04}"), stats);
    }
    let summary = SynthSummary {
        spool: args.out.display().to_string(),
        producers,
    };
    crate::emit(None, &to_json_pretty(&summary))
}

fn record_stream(dir: &Path, producer: &str, events: Vec<EventRecord>) -> anyhow::Result<RecorderStats> {
    let mut cfg = RecorderConfig::new(dir, producer);
    cfg.capacity = events.len().max(1);
    let path = cfg.spool_path();
    if path.exists() {
        std::fs::remove_file(&path).with_context(|| format!("cannot replace {}", path.display()))?;
    }
    let rec = Recorder::open(cfg)?;
    for e in events {
        rec.record(e);
    }
    let stats = rec.close()?;
    if stats.shed > 0 {
        bail!("{producer}: {} events shed", stats.shed);
    }
    Ok(stats)
}
