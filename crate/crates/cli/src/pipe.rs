use std::collections::BTreeMap;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use ditforge_core::pipeline_rpc::{
    filler_frame, Mode, PeersFile, PipeMetrics, Producer, QueuePolicy, Recv, Registry, RegistryOptions, TcpConsumer,
    TcpProducer,
};
use ditforge_core::to_json_pretty;
use serde::Serialize;

use crate::units::{parse_size, Rate};

#[derive(Subcommand)]
pub enum PipeCommand {
    /// Serve a pipe from this process and stream filler frames to its consumers.
    Produce(ProduceArgs),
    /// Connect to a pipe's producers and drain it.
    Consume(ConsumeArgs),
    /// In-process producer feeding two jobs of consumers; prints pipe metrics.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Block,
    Drop,
}

#[derive(Args)]
pub struct QueueArgs {
    #[arg(long, default_value_t = 64)]
    queue_capacity: usize,
    /// What a send does when a consumer queue is full.
    #[arg(long, value_enum, default_value_t = PolicyArg::Block)]
    policy: PolicyArg,
    /// Block policy deadline.
    #[arg(long, default_value_t = 5000)]
    deadline_ms: u64,
}

impl QueueArgs {
    fn options(&self) -> RegistryOptions {
        RegistryOptions {
            queue_capacity: self.queue_capacity.max(1),
            policy: match self.policy {
                PolicyArg::Block => QueuePolicy::Block {
                    deadline_ms: self.deadline_ms,
                },
                PolicyArg::Drop => QueuePolicy::Drop,
            },
            ..RegistryOptions::default()
        }
    }
}

#[derive(Args)]
pub struct ProduceArgs {
    #[arg(long)]
    peers: PathBuf,
    #[arg(long)]
    pipe: String,
    /// Which of the pipe's producer addresses this process serves.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Listen address overriding the peers file entry.
    #[arg(long)]
    bind: Option<String>,
    /// Frames per second, e.g. `100/s`; `max` sends unpaced.
    #[arg(long, default_value = "max")]
    rate: Rate,
    /// Payload bytes per frame, e.g. `4MiB`.
    #[arg(long, value_parser = parse_size, default_value = "4MiB")]
    size: usize,
    #[arg(long, default_value_t = 100)]
    count: u64,
    /// Consumers to wait for before sending; defaults to those listed for the pipe.
    #[arg(long)]
    wait_consumers: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    wait_timeout_s: f64,
    #[command(flatten)]
    queue: QueueArgs,
}

#[derive(Args)]
pub struct ConsumeArgs {
    #[arg(long)]
    peers: PathBuf,
    #[arg(long)]
    pipe: String,
    /// Which of the pipe's consumer entries this process is.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Job id overriding the peers file entry.
    #[arg(long)]
    job: Option<String>,
    /// Stop after this many frames instead of at end of stream.
    #[arg(long)]
    max: Option<u64>,
    #[arg(long, default_value_t = 30.0)]
    connect_timeout_s: f64,
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, default_value = "latents")]
    pipe: String,
    #[arg(long, default_value_t = 200)]
    frames: u64,
    #[arg(long, value_parser = parse_size, default_value = "64KiB")]
    size: usize,
    #[arg(long, default_value_t = 2)]
    jobs: usize,
    /// Consumers per job.
    #[arg(long, default_value_t = 2)]
    consumers: usize,
    #[arg(long, default_value = "broadcast")]
    mode: Mode,
    #[arg(long, default_value = "max")]
    rate: Rate,
    /// Route every frame through loopback TCP instead of in-process queues.
    #[arg(long)]
    tcp: bool,
    #[command(flatten)]
    queue: QueueArgs,
}

pub fn run(cmd: PipeCommand) -> anyhow::Result<()> {
    match cmd {
        PipeCommand::Produce(a) => produce(a),
        PipeCommand::Consume(a) => consume(a),
        PipeCommand::Demo(a) => demo(a),
    }
}

/// Sends `count` filler frames, pacing to `rate`; the payload's first byte is the
/// low byte of the sequence number so receivers can check ordering.
fn stream_frames(producer: &Producer, count: u64, size: usize, rate: Rate) -> anyhow::Result<(u64, f64)> {
    let start = Instant::now();
    let mut bytes = 0;
    for i in 0..count {
        if let Rate(Some(r)) = rate {
            let due = start + Duration::from_secs_f64(i as f64 / r);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
        let ack = producer.send(filler_frame(producer.pipe_name(), size, i as u8))?;
        if ack.dropped > 0 {
            log::debug!("frame {} dropped for {} group(s)", ack.seq_no, ack.dropped);
        }
        bytes += size as u64;
    }
    Ok((bytes, start.elapsed().as_secs_f64()))
}

#[derive(Serialize)]
struct ProduceSummary {
    pipe: String,
    listen: String,
    consumers: usize,
    sent: u64,
    bytes: u64,
    elapsed_s: f64,
    metrics: PipeMetrics,
}

fn produce(args: ProduceArgs) -> anyhow::Result<()> {
    let peers = PeersFile::load(&args.peers)?;
    let entry = peers.pipe(&args.pipe)?;
    let addr = match &args.bind {
        Some(a) => a.clone(),
        None => entry
            .producers
            .get(args.index)
            .cloned()
            .with_context(|| format!("pipe {} has no producer #{}", args.pipe, args.index))?,
    };
    let registry = Registry::new(args.queue.options());
    let server = TcpProducer::bind(&registry, &addr, &args.pipe, entry.mode)?;
    let want = args.wait_consumers.unwrap_or(entry.consumers.len());
    log::info!("pipe {} listening on {}, waiting for {want} consumer(s)", args.pipe, server.local_addr());
    if !server.wait_for_consumers(want, Duration::from_secs_f64(args.wait_timeout_s)) {
        let got = server.connected();
        if got == 0 && want > 0 {
            bail!("no consumer connected to {} within {}s", server.local_addr(), args.wait_timeout_s);
        }
        log::warn!("only {got} of {want} consumers connected; streaming anyway");
    }
    let consumers = server.connected();
    let (bytes, elapsed_s) = stream_frames(server.producer(), args.count, args.size, args.rate)?;
    let metrics = server.producer().metrics();
    let listen = server.local_addr().to_string();
    server.shutdown();
    let summary = ProduceSummary {
        pipe: args.pipe,
        listen,
        consumers,
        sent: args.count,
        bytes,
        elapsed_s,
        metrics,
    };
    crate::emit(None, &to_json_pretty(&summary))
}

#[derive(Debug, Default, Serialize)]
struct ConsumeSummary {
    pipe: String,
    job_id: String,
    consumer: String,
    received: u64,
    bytes: u64,
    corrupt: u64,
    /// Frames whose payload tag disagreed with their sequence number.
    mismatched: u64,
    first_seq: Option<u64>,
    last_seq: Option<u64>,
    elapsed_s: f64,
    gbps: f64,
}

fn consume(args: ConsumeArgs) -> anyhow::Result<()> {
    let peers = PeersFile::load(&args.peers)?;
    let entry = peers.pipe(&args.pipe)?;
    let listed = entry.consumers.get(args.index);
    let job_id = match (&args.job, listed) {
        (Some(j), _) => j.clone(),
        (None, Some(c)) => c.job_id.clone(),
        (None, None) => bail!("pipe {} has no consumer #{} and no --job given", args.pipe, args.index),
    };
    let consumer_id = listed.map_or_else(|| format!("{job_id}-{}", args.index), |c| c.addr.clone());
    let conn = TcpConsumer::connect(
        &entry.producers,
        &args.pipe,
        &job_id,
        &consumer_id,
        Duration::from_secs_f64(args.connect_timeout_s),
    )?;
    let mut s = ConsumeSummary {
        pipe: args.pipe.clone(),
        job_id,
        consumer: consumer_id,
        ..Default::default()
    };
    let start = Instant::now();
    while args.max.map_or(true, |m| s.received < m) {
        match conn.recv() {
            Recv::Frame(f) => {
                s.received += 1;
                s.bytes += f.payload.len() as u64;
                s.mismatched += (f.payload.first() != Some(&(f.seq_no as u8))) as u64;
                s.first_seq.get_or_insert(f.seq_no);
                s.last_seq = Some(f.seq_no);
            }
            Recv::EndOfStream => break,
        }
    }
    s.elapsed_s = start.elapsed().as_secs_f64();
    s.gbps = if s.elapsed_s > 0.0 { s.bytes as f64 / s.elapsed_s / 1e9 } else { 0.0 };
    s.corrupt = conn.corrupt_frames();
    conn.join();
    crate::emit(None, &to_json_pretty(&s))
}

#[derive(Debug, Default, Serialize)]
struct ConsumerTally {
    job_id: String,
    consumer: String,
    frames: u64,
    bytes: u64,
    #[serde(skip)]
    seqs: Vec<u64>,
}

#[derive(Serialize)]
struct JobTally {
    frames: u64,
    /// Every sequence number seen exactly once across the job's consumers.
    gap_free: bool,
}

#[derive(Serialize)]
struct DemoSummary {
    mode: Mode,
    transport: &'static str,
    sent: u64,
    elapsed_s: f64,
    jobs: BTreeMap<String, JobTally>,
    /// Spray: the union over all consumers covers every frame exactly once.
    union_gap_free: bool,
    consumers: Vec<ConsumerTally>,
    metrics: PipeMetrics,
}

fn tally(recv: impl Fn() -> Recv, job_id: String, consumer: String) -> ConsumerTally {
    let mut t = ConsumerTally {
        job_id,
        consumer,
        ..Default::default()
    };
    while let Recv::Frame(f) = recv() {
        t.frames += 1;
        t.bytes += f.payload.len() as u64;
        t.seqs.push(f.seq_no);
    }
    t
}

fn demo(args: DemoArgs) -> anyhow::Result<()> {
    if args.jobs == 0 || args.consumers == 0 {
        bail!("demo needs at least one job and one consumer per job");
    }
    let registry = Registry::new(args.queue.options());
    let names: Vec<(String, String)> = (0..args.jobs)
        .flat_map(|j| {
            let job = format!("job-{}", (b'a' + (j % 26) as u8) as char);
            (0..args.consumers).map(move |c| (job.clone(), format!("{job}/{c}")))
        })
        .collect();

    let (producer, server, handles) = if args.tcp {
        let server = TcpProducer::bind(&registry, "127.0.0.1:0", &args.pipe, args.mode)?;
        let addr = vec![server.local_addr().to_string()];
        let mut handles = Vec::new();
        for (job, id) in &names {
            let conn = TcpConsumer::connect(&addr, &args.pipe, job, id, Duration::from_secs(5))?;
            let (job, id) = (job.clone(), id.clone());
            handles.push(thread::spawn(move || {
                let t = tally(|| conn.recv(), job, id);
                conn.join();
                t
            }));
        }
        if !server.wait_for_consumers(names.len(), Duration::from_secs(5)) {
            bail!("only {} of {} loopback consumers connected", server.connected(), names.len());
        }
        (server.producer().clone(), Some(server), handles)
    } else {
        let producer = registry.producer(&args.pipe, "demo-producer", args.mode)?;
        let mut handles = Vec::new();
        for (job, id) in &names {
            let c = registry.consumer(&args.pipe, id, job, args.mode)?;
            let (job, id) = (job.clone(), id.clone());
            handles.push(thread::spawn(move || tally(|| c.recv(), job, id)));
        }
        (producer, None, handles)
    };

    let (_, elapsed_s) = stream_frames(&producer, args.frames, args.size, args.rate)?;
    let metrics_before_close = producer.metrics();
    match server {
        Some(s) => s.shutdown(),
        None => producer.close(),
    }
    drop(producer);
    let mut consumers: Vec<ConsumerTally> = handles
        .into_iter()
        .map(|h| h.join().expect("consumer thread"))
        .collect();
    let metrics = registry.metrics(&args.pipe).unwrap_or(metrics_before_close);

    let mut jobs = BTreeMap::new();
    let mut by_job: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for c in &consumers {
        by_job.entry(c.job_id.clone()).or_default().extend(&c.seqs);
    }
    for (job, mut seqs) in by_job {
        seqs.sort_unstable();
        let gap_free = seqs.iter().copied().eq(0..args.frames);
        jobs.insert(
            job,
            JobTally {
                frames: seqs.len() as u64,
                gap_free,
            },
        );
    }
    let mut all: Vec<u64> = consumers.iter().flat_map(|c| c.seqs.iter().copied()).collect();
    all.sort_unstable();
    let union_gap_free = all.iter().copied().eq(0..args.frames);
    consumers.sort_by(|a, b| a.consumer.cmp(&b.consumer));
    let summary = DemoSummary {
        mode: args.mode,
        transport: if args.tcp { "tcp" } else { "in-process" },
        sent: args.frames,
        elapsed_s,
        jobs,
        union_gap_free,
        consumers,
        metrics,
    };
    crate::emit(None, &to_json_pretty(&summary))
}
