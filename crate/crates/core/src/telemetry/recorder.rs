use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use serde::{Deserialize, Serialize};

use super::store::{SpoolLine, SPOOL_SUFFIX};
use super::EventRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecorderConfig {
    pub spool_dir: PathBuf,
    pub producer_id: String,
    /// In-memory buffer bound, in events.
    pub capacity: usize,
    /// Largest batch written per flush.
    pub batch: usize,
    pub flush_interval_ms: u64,
}

impl RecorderConfig {
    pub fn new(spool_dir: impl Into<PathBuf>, producer_id: impl Into<String>) -> Self {
        Self {
            spool_dir: spool_dir.into(),
            producer_id: producer_id.into(),
            capacity: 65_536,
            batch: 4_096,
            flush_interval_ms: 20,
        }
    }

    pub fn spool_path(&self) -> PathBuf {
        self.spool_dir.join(format!("{}{SPOOL_SUFFIX}", self.producer_id))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecorderStats {
    pub offered: u64,
    pub accepted: u64,
    pub shed: u64,
    pub written: u64,
}

#[derive(Default)]
struct Counters {
    offered: AtomicU64,
    accepted: AtomicU64,
    shed: AtomicU64,
    written: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> RecorderStats {
        RecorderStats {
            offered: self.offered.load(Ordering::Acquire),
            accepted: self.accepted.load(Ordering::Acquire),
            shed: self.shed.load(Ordering::Acquire),
            written: self.written.load(Ordering::Acquire),
        }
    }
}

#[derive(Default)]
struct Control {
    pause_requested: bool,
    paused: bool,
    written: u64,
    failed: Option<String>,
}

struct Shared {
    counters: Counters,
    control: Mutex<Control>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Control> {
        self.control.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Asynchronous event recorder. `record` never blocks: when the buffer is full
/// the event is shed and counted.
pub struct Recorder {
    tx: Option<Sender<EventRecord>>,
    shared: Arc<Shared>,
    flusher: Option<JoinHandle<io::Result<()>>>,
    path: PathBuf,
}

fn next_seq(path: &Path) -> io::Result<u64> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f).lines().count() as u64),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(e),
    }
}

impl Recorder {
    pub fn open(cfg: RecorderConfig) -> io::Result<Self> {
        std::fs::create_dir_all(&cfg.spool_dir)?;
        let path = cfg.spool_path();
        // Appending to an existing spool continues its sequence.
        let seq = next_seq(&path)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let (tx, rx) = bounded(cfg.capacity.max(1));
        let shared = Arc::new(Shared {
            counters: Counters::default(),
            control: Mutex::new(Control::default()),
            changed: Condvar::new(),
        });
        let flusher = {
            let shared = shared.clone();
            let producer = cfg.producer_id.clone();
            let batch = cfg.batch.max(1);
            let interval = Duration::from_millis(cfg.flush_interval_ms.max(1));
            thread::Builder::new()
                .name(format!("telemetry-{producer}"))
                .spawn(move || {
                    let r = flush_loop(rx, file, producer, seq, batch, interval, &shared);
                    if let Err(e) = &r {
                        shared.lock().failed = Some(e.to_string());
                        shared.changed.notify_all();
                    }
                    r
                })?
        };
        Ok(Self {
            tx: Some(tx),
            shared,
            flusher: Some(flusher),
            path,
        })
    }

    pub fn spool_path(&self) -> &Path {
        &self.path
    }

    /// Enqueues the event; `false` means it was shed.
    pub fn record(&self, event: EventRecord) -> bool {
        let c = &self.shared.counters;
        c.offered.fetch_add(1, Ordering::Relaxed);
        match self.tx.as_ref().map(|tx| tx.try_send(event)) {
            Some(Ok(())) => {
                c.accepted.fetch_add(1, Ordering::Relaxed);
                true
            }
            Some(Err(TrySendError::Full(_) | TrySendError::Disconnected(_))) | None => {
                c.shed.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    pub fn stats(&self) -> RecorderStats {
        self.shared.counters.snapshot()
    }

    /// Stops the flusher from draining the buffer; returns once it has
    /// acknowledged.
    pub fn pause(&self) {
        let mut ctl = self.shared.lock();
        ctl.pause_requested = true;
        self.shared.changed.notify_all();
        while !ctl.paused && ctl.failed.is_none() {
            ctl = self.shared.changed.wait(ctl).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn resume(&self) {
        let mut ctl = self.shared.lock();
        ctl.pause_requested = false;
        self.shared.changed.notify_all();
    }

    /// Waits until everything accepted so far is on disk.
    pub fn flush(&self) -> io::Result<()> {
        let target = self.shared.counters.accepted.load(Ordering::Acquire);
        let mut ctl = self.shared.lock();
        while ctl.written < target {
            if let Some(e) = &ctl.failed {
                return Err(io::Error::other(e.clone()));
            }
            if ctl.pause_requested {
                return Err(io::Error::other("recorder is paused"));
            }
            ctl = self.shared.changed.wait(ctl).unwrap_or_else(|e| e.into_inner());
        }
        Ok(())
    }

    /// Drains the buffer, closes the spool and returns the final counts.
    pub fn close(mut self) -> io::Result<RecorderStats> {
        self.shutdown()?;
        Ok(self.stats())
    }

    fn shutdown(&mut self) -> io::Result<()> {
        self.resume();
        self.tx.take();
        match self.flusher.take() {
            Some(h) => h.join().map_err(|_| io::Error::other("telemetry flusher panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("telemetry spool {}: {e}", self.path.display());
        }
    }
}

fn flush_loop(
    rx: Receiver<EventRecord>,
    file: File,
    producer: String,
    mut seq: u64,
    batch: usize,
    interval: Duration,
    shared: &Shared,
) -> io::Result<()> {
    let mut out = BufWriter::with_capacity(1 << 16, file);
    let mut pending = Vec::with_capacity(batch);
    let mut last_write = Instant::now();
    loop {
        {
            let mut ctl = shared.lock();
            if ctl.pause_requested {
                ctl.paused = true;
                shared.changed.notify_all();
                while ctl.pause_requested {
                    ctl = shared.changed.wait(ctl).unwrap_or_else(|e| e.into_inner());
                }
                ctl.paused = false;
            }
        }
        let disconnected = match rx.recv_timeout(interval) {
            Ok(ev) => {
                pending.push(ev);
                // Waking per event would cost the producer a context switch
                // each time on a busy core; let a batch build up instead.
                let wait = interval.saturating_sub(last_write.elapsed());
                if !wait.is_zero() && rx.len() < batch {
                    thread::sleep(wait);
                }
                false
            }
            Err(RecvTimeoutError::Timeout) => false,
            Err(RecvTimeoutError::Disconnected) => true,
        };
        while pending.len() < batch {
            match rx.try_recv() {
                Ok(ev) => pending.push(ev),
                Err(_) => break,
            }
        }
        if !pending.is_empty() {
            let count = pending.len() as u64;
            for event in pending.drain(..) {
                let line = SpoolLine {
                    producer: producer.clone(),
                    seq,
                    event,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
                seq += 1;
            }
            out.flush()?;
            last_write = Instant::now();
            shared.counters.written.fetch_add(count, Ordering::AcqRel);
            shared.lock().written += count;
            shared.changed.notify_all();
        }
        if disconnected && rx.is_empty() {
            out.flush()?;
            return Ok(());
        }
    }
}
