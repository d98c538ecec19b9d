use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender, TrySendError};
use serde::{Deserialize, Serialize};

use super::frame::{Frame, MAX_NAME_LEN};
use super::metrics::{GroupCounters, GroupMetrics, Histogram, PipeMetrics};
use super::RpcError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer,
}

/// Broadcast copies every frame to each job; spray deals frames out across
/// all consumers of the pipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Broadcast,
    Spray,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Broadcast => "broadcast",
            Mode::Spray => "spray",
        })
    }
}

impl FromStr for Mode {
    type Err = RpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "broadcast" => Ok(Mode::Broadcast),
            "spray" => Ok(Mode::Spray),
            other => Err(RpcError::Invalid(format!("unknown pipe mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SprayPolicy {
    #[default]
    RoundRobin,
    /// Consumer with the shortest queue, round-robin order on ties.
    LeastOutstanding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueuePolicy {
    /// Wait for queue space up to the deadline, then fail the send.
    Block { deadline_ms: u64 },
    /// Discard the frame for that consumer when its queue is full.
    Drop,
}

impl Default for QueuePolicy {
    fn default() -> Self {
        QueuePolicy::Block { deadline_ms: 5_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryOptions {
    pub queue_capacity: usize,
    pub policy: QueuePolicy,
    pub spray: SprayPolicy,
    pub stall_window: u64,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        Self {
            queue_capacity: 64,
            policy: QueuePolicy::default(),
            spray: SprayPolicy::default(),
            stall_window: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipeDecl {
    pub name: String,
    pub role: Role,
    /// Consumers only; producers serve every job.
    pub job_id: Option<String>,
    pub mode: Mode,
    /// Identity of the declaring endpoint, unique per role within a pipe.
    pub endpoint: String,
}

impl PipeDecl {
    pub fn producer(name: &str, endpoint: &str, mode: Mode) -> Self {
        Self {
            name: name.to_string(),
            role: Role::Producer,
            job_id: None,
            mode,
            endpoint: endpoint.to_string(),
        }
    }

    pub fn consumer(name: &str, endpoint: &str, job_id: &str, mode: Mode) -> Self {
        Self {
            name: name.to_string(),
            role: Role::Consumer,
            job_id: Some(job_id.to_string()),
            mode,
            endpoint: endpoint.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), RpcError> {
        if self.name.is_empty() {
            return Err(RpcError::Invalid("pipe name is empty".into()));
        }
        if self.name.len() > MAX_NAME_LEN {
            return Err(RpcError::Invalid(format!(
                "pipe name is {} bytes, limit {MAX_NAME_LEN}",
                self.name.len()
            )));
        }
        match (self.role, &self.job_id) {
            (Role::Producer, Some(job)) => Err(RpcError::Invalid(format!(
                "producer {} bound to job {job}; producers serve all jobs",
                self.endpoint
            ))),
            (Role::Consumer, None) => Err(RpcError::Invalid(format!(
                "consumer {} has no job_id",
                self.endpoint
            ))),
            (Role::Consumer, Some(job)) if job.is_empty() => Err(RpcError::Invalid(format!(
                "consumer {} has an empty job_id",
                self.endpoint
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub seq_no: u64,
    /// Copies enqueued (one per delivery group reached).
    pub delivered: u32,
    pub dropped: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recv {
    Frame(Frame),
    EndOfStream,
}

struct Envelope {
    frame: Frame,
    enqueued_at: Instant,
}

#[derive(Default)]
struct MemberCounters {
    enqueued: AtomicU64,
    consumed: AtomicU64,
}

impl MemberCounters {
    fn outstanding(&self) -> u64 {
        self.enqueued
            .load(Ordering::Acquire)
            .saturating_sub(self.consumed.load(Ordering::Acquire))
    }
}

struct Member {
    id: u64,
    job_id: String,
    tx: Sender<Envelope>,
    counters: Arc<MemberCounters>,
}

#[derive(Default)]
struct Group {
    counters: Arc<GroupCounters>,
    members: Vec<Member>,
    departed: Vec<Arc<MemberCounters>>,
    cursor: usize,
}

#[derive(Default)]
struct PipeState {
    producers: BTreeSet<String>,
    consumers: BTreeSet<String>,
    groups: BTreeMap<String, Group>,
}

struct Pipe {
    name: String,
    mode: Mode,
    opts: RegistryOptions,
    state: Mutex<PipeState>,
    live_producers: AtomicUsize,
    ever_produced: AtomicBool,
    next_member: AtomicU64,
    produced: AtomicU64,
    queue_latency: Histogram,
    transfer: Histogram,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Pipe {
    fn group_key<'a>(&self, job_id: &'a str) -> &'a str {
        match self.mode {
            Mode::Broadcast => job_id,
            Mode::Spray => "*",
        }
    }

    fn at_end(&self) -> bool {
        self.ever_produced.load(Ordering::SeqCst) && self.live_producers.load(Ordering::SeqCst) == 0
    }

    fn metrics(&self) -> PipeMetrics {
        let state = lock(&self.state);
        let mut groups = Vec::with_capacity(state.groups.len());
        for (key, g) in &state.groups {
            let mut gm = GroupMetrics {
                group: key.clone(),
                consumers: g.members.len(),
                dropped: g.counters.dropped.load(Ordering::Acquire),
                timed_out: g.counters.timed_out.load(Ordering::Acquire),
                ..Default::default()
            };
            for m in &g.members {
                let (e, c) = (m.counters.enqueued.load(Ordering::Acquire), m.counters.consumed.load(Ordering::Acquire));
                gm.enqueued += e;
                gm.consumed += c;
                gm.in_queue += e.saturating_sub(c);
            }
            for d in &g.departed {
                let (e, c) = (d.enqueued.load(Ordering::Acquire), d.consumed.load(Ordering::Acquire));
                gm.enqueued += e;
                gm.consumed += c;
                gm.dropped += e.saturating_sub(c);
            }
            groups.push(gm);
        }
        drop(state);
        let window = self.opts.stall_window;
        PipeMetrics {
            pipe: self.name.clone(),
            produced: self.produced.load(Ordering::Acquire),
            consumed: groups.iter().map(|g| g.consumed).sum(),
            dropped: groups.iter().map(|g| g.dropped).sum(),
            timed_out: groups.iter().map(|g| g.timed_out).sum(),
            queue_latency_ns: self.queue_latency.snapshot(),
            transfer_ns: self.transfer.snapshot(),
            stall_alarm: groups.iter().any(|g| g.lag() > window),
            stall_window: window,
            groups,
        }
    }
}

struct RegistryInner {
    opts: RegistryOptions,
    pipes: Mutex<HashMap<String, Arc<Pipe>>>,
}

/// In-process directory of named pipes.
#[derive(Clone)]
pub struct Registry {
    inner: Arc<RegistryInner>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(RegistryOptions::default())
    }
}

pub enum PipeHandle {
    Producer(Producer),
    Consumer(Consumer),
}

impl PipeHandle {
    pub fn into_producer(self) -> Option<Producer> {
        match self {
            PipeHandle::Producer(p) => Some(p),
            PipeHandle::Consumer(_) => None,
        }
    }

    pub fn into_consumer(self) -> Option<Consumer> {
        match self {
            PipeHandle::Consumer(c) => Some(c),
            PipeHandle::Producer(_) => None,
        }
    }
}

impl Registry {
    pub fn new(opts: RegistryOptions) -> Self {
        Self {
            inner: Arc::new(RegistryInner {
                opts: RegistryOptions {
                    queue_capacity: opts.queue_capacity.max(1),
                    ..opts
                },
                pipes: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn options(&self) -> &RegistryOptions {
        &self.inner.opts
    }

    fn pipe_for(&self, decl: &PipeDecl) -> Result<Arc<Pipe>, RpcError> {
        let mut pipes = lock(&self.inner.pipes);
        let pipe = pipes
            .entry(decl.name.clone())
            .or_insert_with(|| {
                Arc::new(Pipe {
                    name: decl.name.clone(),
                    mode: decl.mode,
                    opts: self.inner.opts.clone(),
                    state: Mutex::new(PipeState::default()),
                    live_producers: AtomicUsize::new(0),
                    ever_produced: AtomicBool::new(false),
                    next_member: AtomicU64::new(0),
                    produced: AtomicU64::new(0),
                    queue_latency: Histogram::default(),
                    transfer: Histogram::default(),
                })
            })
            .clone();
        if pipe.mode != decl.mode {
            return Err(RpcError::Conflict(format!(
                "pipe {} is {}, {} declared it {}",
                decl.name, pipe.mode, decl.endpoint, decl.mode
            )));
        }
        Ok(pipe)
    }

    pub fn declare_pipe(&self, decl: PipeDecl) -> Result<PipeHandle, RpcError> {
        decl.validate()?;
        let pipe = self.pipe_for(&decl)?;
        let mut state = lock(&pipe.state);
        match decl.role {
            Role::Producer => {
                if !state.producers.insert(decl.endpoint.clone()) {
                    return Err(RpcError::Conflict(format!(
                        "producer {} already declared on pipe {}",
                        decl.endpoint, decl.name
                    )));
                }
                pipe.live_producers.fetch_add(1, Ordering::SeqCst);
                pipe.ever_produced.store(true, Ordering::SeqCst);
                drop(state);
                Ok(PipeHandle::Producer(Producer {
                    inner: Arc::new(ProducerInner {
                        pipe,
                        endpoint: decl.endpoint,
                        seq: Mutex::new(0),
                        closed: AtomicBool::new(false),
                    }),
                }))
            }
            Role::Consumer => {
                let job_id = decl.job_id.clone().expect("validated");
                if !state.consumers.insert(decl.endpoint.clone()) {
                    return Err(RpcError::Conflict(format!(
                        "consumer {} already declared on pipe {}",
                        decl.endpoint, decl.name
                    )));
                }
                let (tx, rx) = bounded(pipe.opts.queue_capacity);
                let id = pipe.next_member.fetch_add(1, Ordering::Relaxed);
                let counters = Arc::new(MemberCounters::default());
                let key = pipe.group_key(&job_id).to_string();
                let group = state.groups.entry(key.clone()).or_default();
                group.members.push(Member {
                    id,
                    job_id: job_id.clone(),
                    tx,
                    counters: counters.clone(),
                });
                group.cursor = 0;
                drop(state);
                Ok(PipeHandle::Consumer(Consumer {
                    pipe,
                    id,
                    endpoint: decl.endpoint,
                    job_id,
                    group: key,
                    rx: Some(rx),
                    counters,
                }))
            }
        }
    }

    pub fn producer(&self, name: &str, endpoint: &str, mode: Mode) -> Result<Producer, RpcError> {
        Ok(self
            .declare_pipe(PipeDecl::producer(name, endpoint, mode))?
            .into_producer()
            .expect("producer role"))
    }

    pub fn consumer(&self, name: &str, endpoint: &str, job_id: &str, mode: Mode) -> Result<Consumer, RpcError> {
        Ok(self
            .declare_pipe(PipeDecl::consumer(name, endpoint, job_id, mode))?
            .into_consumer()
            .expect("consumer role"))
    }

    /// Delivery groups and their consumer counts.
    pub fn topology(&self, name: &str) -> Option<BTreeMap<String, usize>> {
        let pipe = lock(&self.inner.pipes).get(name)?.clone();
        let state = lock(&pipe.state);
        Some(state.groups.iter().map(|(k, g)| (k.clone(), g.members.len())).collect())
    }

    pub fn metrics(&self, name: &str) -> Option<PipeMetrics> {
        let pipe = lock(&self.inner.pipes).get(name)?.clone();
        Some(pipe.metrics())
    }

    pub fn pipe_names(&self) -> Vec<String> {
        let mut names: Vec<String> = lock(&self.inner.pipes).keys().cloned().collect();
        names.sort();
        names
    }
}

struct ProducerInner {
    pipe: Arc<Pipe>,
    endpoint: String,
    seq: Mutex<u64>,
    closed: AtomicBool,
}

impl ProducerInner {
    fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut state = lock(&self.pipe.state);
        state.producers.remove(&self.endpoint);
        self.pipe.live_producers.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Drop for ProducerInner {
    fn drop(&mut self) {
        self.close();
    }
}

/// Sending end of a pipe. Clones share one sequence counter; the pipe sees the
/// producer as gone when it is closed or the last clone drops.
#[derive(Clone)]
pub struct Producer {
    inner: Arc<ProducerInner>,
}

struct Target {
    counters: Arc<GroupCounters>,
    /// Preferred member first, the rest as fallbacks if it has gone away.
    candidates: Vec<(String, Sender<Envelope>, Arc<MemberCounters>)>,
}

enum Outcome {
    Delivered,
    Dropped,
    Pending(Envelope),
}

impl Producer {
    pub fn pipe_name(&self) -> &str {
        &self.inner.pipe.name
    }

    pub fn endpoint(&self) -> &str {
        &self.inner.endpoint
    }

    pub fn metrics(&self) -> PipeMetrics {
        self.inner.pipe.metrics()
    }

    pub fn close(&self) {
        self.inner.close();
    }

    fn targets(&self) -> Vec<Target> {
        let pipe = &self.inner.pipe;
        let mut state = lock(&pipe.state);
        let mut out = Vec::with_capacity(state.groups.len());
        for g in state.groups.values_mut() {
            let n = g.members.len();
            let first = if n == 0 {
                0
            } else {
                match pipe.opts.spray {
                    SprayPolicy::RoundRobin => g.cursor % n,
                    SprayPolicy::LeastOutstanding => (0..n)
                        .map(|i| (g.cursor + i) % n)
                        .min_by_key(|&i| g.members[i].counters.outstanding())
                        .expect("n > 0"),
                }
            };
            if n > 0 {
                g.cursor = (first + 1) % n;
            }
            out.push(Target {
                counters: g.counters.clone(),
                candidates: (0..n)
                    .map(|i| {
                        let m = &g.members[(first + i) % n];
                        (m.job_id.clone(), m.tx.clone(), m.counters.clone())
                    })
                    .collect(),
            });
        }
        out
    }

    /// Sends one frame; the pipe name and sequence number are filled in here.
    pub fn send(&self, mut frame: Frame) -> Result<Ack, RpcError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(RpcError::Closed(self.inner.pipe.name.clone()));
        }
        let pipe = &self.inner.pipe;
        let mut seq = lock(&self.inner.seq);
        frame.name = pipe.name.clone();
        frame.seq_no = *seq;
        frame.validate()?;
        *seq += 1;

        let started = Instant::now();
        let deadline = match pipe.opts.policy {
            QueuePolicy::Block { deadline_ms } => Some(started + Duration::from_millis(deadline_ms)),
            QueuePolicy::Drop => None,
        };
        pipe.produced.fetch_add(1, Ordering::AcqRel);
        let mut ack = Ack {
            seq_no: frame.seq_no,
            delivered: 0,
            dropped: 0,
        };
        let mut targets = self.targets();
        let mut pending = Vec::new();
        for (ti, t) in targets.iter_mut().enumerate() {
            let env = Envelope {
                frame: frame.clone(),
                enqueued_at: Instant::now(),
            };
            match try_deliver(t, env) {
                Outcome::Delivered => ack.delivered += 1,
                Outcome::Dropped => {
                    t.counters.dropped.fetch_add(1, Ordering::AcqRel);
                    ack.dropped += 1;
                }
                Outcome::Pending(_) if deadline.is_none() => {
                    t.counters.dropped.fetch_add(1, Ordering::AcqRel);
                    ack.dropped += 1;
                }
                Outcome::Pending(env) => pending.push((ti, env)),
            }
        }
        let mut stalled = Vec::new();
        for (ti, env) in pending {
            let t = &mut targets[ti];
            match block_deliver(t, env, deadline.expect("pending only under block policy")) {
                Ok(true) => ack.delivered += 1,
                Ok(false) => {
                    t.counters.dropped.fetch_add(1, Ordering::AcqRel);
                    ack.dropped += 1;
                }
                Err(job) => {
                    t.counters.timed_out.fetch_add(1, Ordering::AcqRel);
                    stalled.push(job);
                }
            }
        }
        pipe.transfer.record(started.elapsed().as_nanos() as u64);
        drop(seq);
        if stalled.is_empty() {
            Ok(ack)
        } else {
            stalled.sort();
            stalled.dedup();
            Err(RpcError::BackpressureTimeout {
                pipe: pipe.name.clone(),
                jobs: stalled,
                seq_no: ack.seq_no,
            })
        }
    }
}

fn try_deliver(t: &mut Target, mut env: Envelope) -> Outcome {
    // An empty candidate list means nobody is left in the group.
    while !t.candidates.is_empty() {
        let (_, tx, counters) = &t.candidates[0];
        env.enqueued_at = Instant::now();
        counters.enqueued.fetch_add(1, Ordering::AcqRel);
        match tx.try_send(env) {
            Ok(()) => return Outcome::Delivered,
            Err(TrySendError::Full(e)) => {
                counters.enqueued.fetch_sub(1, Ordering::AcqRel);
                return Outcome::Pending(e);
            }
            Err(TrySendError::Disconnected(e)) => {
                counters.enqueued.fetch_sub(1, Ordering::AcqRel);
                env = e;
                t.candidates.remove(0);
            }
        }
    }
    Outcome::Dropped
}

/// `Ok(true)` delivered, `Ok(false)` nobody left to take it, `Err(job)` deadline hit.
fn block_deliver(t: &mut Target, mut env: Envelope, deadline: Instant) -> Result<bool, String> {
    if t.candidates.is_empty() {
        return Ok(false);
    }
    // Under block policy the pending frame stays with the chosen consumer.
    let (job, tx, counters) = t.candidates[0].clone();
    env.enqueued_at = Instant::now();
    counters.enqueued.fetch_add(1, Ordering::AcqRel);
    match tx.send_deadline(env, deadline) {
        Ok(()) => Ok(true),
        Err(SendTimeoutError::Timeout(_)) => {
            counters.enqueued.fetch_sub(1, Ordering::AcqRel);
            Err(job)
        }
        Err(SendTimeoutError::Disconnected(e)) => {
            counters.enqueued.fetch_sub(1, Ordering::AcqRel);
            t.candidates.remove(0);
            match try_deliver(t, e) {
                Outcome::Delivered => Ok(true),
                Outcome::Dropped => Ok(false),
                Outcome::Pending(e) => block_deliver(t, e, deadline),
            }
        }
    }
}

/// Receiving end of a pipe. Dropping it leaves the pipe; frames still queued
/// for it are counted as dropped.
pub struct Consumer {
    pipe: Arc<Pipe>,
    id: u64,
    endpoint: String,
    job_id: String,
    group: String,
    rx: Option<Receiver<Envelope>>,
    counters: Arc<MemberCounters>,
}

const EOS_POLL: Duration = Duration::from_millis(5);

impl Consumer {
    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn pipe_name(&self) -> &str {
        &self.pipe.name
    }

    pub fn metrics(&self) -> PipeMetrics {
        self.pipe.metrics()
    }

    /// Frames waiting in this consumer's queue.
    pub fn queued(&self) -> usize {
        self.rx.as_ref().map_or(0, |r| r.len())
    }

    fn accept(&self, env: Envelope) -> Recv {
        self.pipe
            .queue_latency
            .record(env.enqueued_at.elapsed().as_nanos() as u64);
        self.counters.consumed.fetch_add(1, Ordering::AcqRel);
        Recv::Frame(env.frame)
    }

    /// Blocks until a frame arrives or every producer has closed and the queue
    /// is drained.
    pub fn recv(&self) -> Recv {
        loop {
            if let Some(r) = self.recv_timeout(Duration::from_secs(3600)) {
                return r;
            }
        }
    }

    /// `None` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Recv> {
        let rx = self.rx.as_ref().expect("receiver present until drop");
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            let step = EOS_POLL.min(deadline - now);
            match rx.recv_timeout(step) {
                Ok(env) => return Some(self.accept(env)),
                Err(RecvTimeoutError::Disconnected) => return Some(Recv::EndOfStream),
                Err(RecvTimeoutError::Timeout) => {
                    if self.pipe.at_end() {
                        // A frame may have landed between the timeout and the check.
                        return Some(match rx.try_recv() {
                            Ok(env) => self.accept(env),
                            Err(_) => Recv::EndOfStream,
                        });
                    }
                }
            }
        }
    }

    /// Non-blocking receive.
    pub fn try_recv(&self) -> Option<Recv> {
        let rx = self.rx.as_ref().expect("receiver present until drop");
        match rx.try_recv() {
            Ok(env) => Some(self.accept(env)),
            Err(_) if self.pipe.at_end() && rx.is_empty() => Some(Recv::EndOfStream),
            Err(_) => None,
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        std::iter::from_fn(move || match self.recv() {
            Recv::Frame(f) => Some(f),
            Recv::EndOfStream => None,
        })
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        let mut state = lock(&self.pipe.state);
        state.consumers.remove(&self.endpoint);
        if let Some(g) = state.groups.get_mut(&self.group) {
            if let Some(pos) = g.members.iter().position(|m| m.id == self.id) {
                g.members.remove(pos);
                g.cursor = 0;
                g.departed.push(self.counters.clone());
            }
        }
        // Dropping the receiver under the lock: later sends see a disconnect.
        self.rx.take();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline_rpc::frame::DType;

    fn frame(i: u8) -> Frame {
        Frame::new("x", 0, DType::Uint8, vec![1], vec![i]).unwrap()
    }

    fn drain(c: &Consumer) -> Vec<u64> {
        let mut out = Vec::new();
        while let Some(Recv::Frame(f)) = c.try_recv() {
            out.push(f.seq_no);
        }
        out
    }

    #[test]
    fn spray_round_robin_counts() {
        let reg = Registry::default();
        let p = reg.producer("latents", "p0", Mode::Spray).unwrap();
        let cs: Vec<Consumer> = (0..3)
            .map(|i| reg.consumer("latents", &format!("c{i}"), "job", Mode::Spray).unwrap())
            .collect();
        assert_eq!(reg.topology("latents").unwrap().values().copied().collect::<Vec<_>>(), vec![3]);
        for i in 0..10 {
            p.send(frame(i)).unwrap();
        }
        let got: Vec<Vec<u64>> = cs.iter().map(drain).collect();
        assert_eq!(got.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        for (i, seqs) in got.iter().enumerate() {
            assert!(seqs.iter().all(|s| s % 3 == i as u64));
        }
    }

    #[test]
    fn broadcast_groups_by_job() {
        let reg = Registry::default();
        let p = reg.producer("latents", "p0", Mode::Broadcast).unwrap();
        let a = reg.consumer("latents", "a0", "job-a", Mode::Broadcast).unwrap();
        let b = reg.consumer("latents", "b0", "job-b", Mode::Broadcast).unwrap();
        assert_eq!(reg.topology("latents").unwrap().len(), 2);
        for i in 0..10 {
            let ack = p.send(frame(i)).unwrap();
            assert_eq!(ack.delivered, 2);
        }
        assert_eq!(drain(&a), (0..10).collect::<Vec<_>>());
        assert_eq!(drain(&b), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn declaration_errors() {
        let reg = Registry::default();
        reg.consumer("x", "c0", "j", Mode::Broadcast).map(drop).unwrap();
        let _c = reg.consumer("x", "c1", "j", Mode::Broadcast).unwrap();
        assert!(matches!(reg.consumer("x", "c1", "j", Mode::Broadcast), Err(RpcError::Conflict(_))));
        assert!(matches!(reg.producer("x", "p", Mode::Spray), Err(RpcError::Conflict(_))));
        assert!(matches!("fanout".parse::<Mode>(), Err(RpcError::Invalid(_))));
        let mut bad = PipeDecl::producer("x", "p", Mode::Broadcast);
        bad.job_id = Some("j".into());
        assert!(matches!(reg.declare_pipe(bad), Err(RpcError::Invalid(_))));
        assert!(matches!(
            reg.declare_pipe(PipeDecl::producer("", "p", Mode::Spray)),
            Err(RpcError::Invalid(_))
        ));
        let _p = reg.producer("x", "p", Mode::Broadcast).unwrap();
        assert!(matches!(reg.producer("x", "p", Mode::Broadcast), Err(RpcError::Conflict(_))));
    }

    #[test]
    fn end_of_stream_after_close() {
        let reg = Registry::default();
        let p = reg.producer("x", "p", Mode::Spray).unwrap();
        let c = reg.consumer("x", "c", "j", Mode::Spray).unwrap();
        p.send(frame(1)).unwrap();
        p.close();
        assert!(matches!(p.send(frame(2)), Err(RpcError::Closed(_))));
        assert!(matches!(c.recv(), Recv::Frame(_)));
        assert_eq!(c.recv(), Recv::EndOfStream);
        assert_eq!(c.recv(), Recv::EndOfStream);
    }

    #[test]
    fn block_policy_times_out_naming_job() {
        let reg = Registry::new(RegistryOptions {
            queue_capacity: 2,
            policy: QueuePolicy::Block { deadline_ms: 30 },
            ..Default::default()
        });
        let p = reg.producer("x", "p", Mode::Broadcast).unwrap();
        let slow = reg.consumer("x", "slow", "job-slow", Mode::Broadcast).unwrap();
        let fast = reg.consumer("x", "fast", "job-fast", Mode::Broadcast).unwrap();
        p.send(frame(0)).unwrap();
        p.send(frame(1)).unwrap();
        drain(&fast);
        let t = Instant::now();
        match p.send(frame(2)) {
            Err(RpcError::BackpressureTimeout { jobs, .. }) => assert_eq!(jobs, vec!["job-slow".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(t.elapsed() >= Duration::from_millis(30));
        assert_eq!(drain(&fast), vec![2]);
        let m = reg.metrics("x").unwrap();
        assert_eq!(m.timed_out, 1);
        assert_eq!(m.dropped, 0);
        drop(slow);
    }

    #[test]
    fn drop_policy_counts_losses() {
        let reg = Registry::new(RegistryOptions {
            queue_capacity: 2,
            policy: QueuePolicy::Drop,
            ..Default::default()
        });
        let p = reg.producer("x", "p", Mode::Spray).unwrap();
        let c = reg.consumer("x", "c", "j", Mode::Spray).unwrap();
        for i in 0..5 {
            p.send(frame(i)).unwrap();
        }
        let m = reg.metrics("x").unwrap();
        assert_eq!((m.produced, m.dropped, m.groups[0].in_queue), (5, 3, 2));
        assert_eq!(drain(&c), vec![0, 1]);
    }

    #[test]
    fn metrics_and_stall_alarm() {
        let reg = Registry::new(RegistryOptions {
            queue_capacity: 128,
            stall_window: 30,
            ..Default::default()
        });
        let p = reg.producer("x", "p", Mode::Spray).unwrap();
        let c = reg.consumer("x", "c", "j", Mode::Spray).unwrap();
        let idle = reg.metrics("x").unwrap();
        assert_eq!((idle.produced, idle.consumed, idle.dropped, idle.stall_alarm), (0, 0, 0, false));
        assert_eq!(idle.queue_latency_ns.count, 0);
        for i in 0..100 {
            p.send(frame(i as u8)).unwrap();
        }
        for _ in 0..40 {
            c.recv();
        }
        let m = reg.metrics("x").unwrap();
        assert_eq!((m.produced, m.consumed), (100, 40));
        assert!(m.stall_alarm);
        for _ in 0..60 {
            c.recv();
        }
        let m = reg.metrics("x").unwrap();
        assert_eq!((m.produced, m.consumed), (100, 100));
        assert!(!m.stall_alarm);
        assert_eq!(m.queue_latency_ns.count, 100);
        assert_eq!(m.transfer_ns.count, 100);
    }

    #[test]
    fn departed_consumer_frames_counted_and_rerouted() {
        let reg = Registry::default();
        let p = reg.producer("x", "p", Mode::Spray).unwrap();
        let a = reg.consumer("x", "a", "j", Mode::Spray).unwrap();
        let b = reg.consumer("x", "b", "j", Mode::Spray).unwrap();
        for i in 0..4 {
            p.send(frame(i)).unwrap();
        }
        drop(a);
        for i in 0..4 {
            p.send(frame(i)).unwrap();
        }
        let m = reg.metrics("x").unwrap();
        assert_eq!(m.dropped, 2);
        assert_eq!(drain(&b), vec![1, 3, 4, 5, 6, 7]);
        let m = reg.metrics("x").unwrap();
        assert_eq!(m.produced, m.consumed + m.dropped);
    }

    #[test]
    fn least_outstanding_prefers_short_queue() {
        let reg = Registry::new(RegistryOptions {
            spray: SprayPolicy::LeastOutstanding,
            ..Default::default()
        });
        let p = reg.producer("x", "p", Mode::Spray).unwrap();
        let a = reg.consumer("x", "a", "j", Mode::Spray).unwrap();
        let b = reg.consumer("x", "b", "j", Mode::Spray).unwrap();
        for i in 0..6 {
            p.send(frame(i)).unwrap();
            // `a` keeps up, `b` never reads.
            drain(&a);
        }
        assert!(b.queued() <= 1, "b holds {}", b.queued());
    }
}
