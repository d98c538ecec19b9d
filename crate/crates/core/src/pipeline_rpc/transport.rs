//! TCP transport. A producer endpoint listens; consumers dial every producer of
//! the pipe and open with a hello frame naming the pipe and their job. Each
//! accepted connection gets a writer thread draining a registry consumer, so
//! queueing, spray and broadcast stay in the in-process registry.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver};
use serde::{Deserialize, Serialize};

use super::frame::{decode_prefix, encode_into, DType, Frame, FrameDecoder, FrameError};
use super::pipe::{Mode, Producer, Recv, Registry};
use super::RpcError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConsumer {
    pub addr: String,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerPipe {
    pub name: String,
    pub producers: Vec<String>,
    pub consumers: Vec<PeerConsumer>,
    pub mode: Mode,
}

/// Static pipe topology shared by every endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeersFile {
    pub pipes: Vec<PeerPipe>,
}

impl PeersFile {
    pub fn load(path: &Path) -> Result<Self, RpcError> {
        let peers: PeersFile = crate::from_json_file(path).map_err(|e| RpcError::Invalid(e.to_string()))?;
        peers.validate()?;
        Ok(peers)
    }

    pub fn validate(&self) -> Result<(), RpcError> {
        let mut names = std::collections::BTreeSet::new();
        for p in &self.pipes {
            if p.name.is_empty() || p.name.len() > super::frame::MAX_NAME_LEN {
                return Err(RpcError::Invalid(format!("bad pipe name {:?}", p.name)));
            }
            if !names.insert(&p.name) {
                return Err(RpcError::Conflict(format!("pipe {} listed twice", p.name)));
            }
            if p.producers.is_empty() {
                return Err(RpcError::Invalid(format!("pipe {} has no producers", p.name)));
            }
            if let Some(c) = p.consumers.iter().find(|c| c.job_id.is_empty()) {
                return Err(RpcError::Invalid(format!("consumer {} on pipe {} has no job_id", c.addr, p.name)));
            }
        }
        Ok(())
    }

    pub fn pipe(&self, name: &str) -> Result<&PeerPipe, RpcError> {
        self.pipes
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| RpcError::Invalid(format!("pipe {name} not in peers file")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Hello {
    job_id: String,
    consumer: String,
}

fn hello_frame(pipe: &str, job_id: &str, consumer: &str) -> Frame {
    let body = serde_json::to_vec(&Hello {
        job_id: job_id.to_string(),
        consumer: consumer.to_string(),
    })
    .expect("hello serializes");
    Frame::bytes(pipe, body)
}

fn read_one_frame(stream: &mut TcpStream, timeout: Duration) -> Result<Frame, RpcError> {
    stream.set_read_timeout(Some(timeout))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 512];
    loop {
        match decode_prefix(&buf) {
            Ok((frame, used)) if used == buf.len() => {
                stream.set_read_timeout(None)?;
                return Ok(frame);
            }
            Ok(_) => return Err(FrameError::Trailing(buf.len()).into()),
            Err(FrameError::Truncated { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(RpcError::Io(io::Error::new(ErrorKind::UnexpectedEof, "peer closed before hello")));
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

/// Listening producer endpoint.
pub struct TcpProducer {
    producer: Producer,
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connected: Arc<AtomicUsize>,
    accept_thread: Option<JoinHandle<()>>,
    writers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

const ACCEPT_POLL: Duration = Duration::from_millis(5);

impl TcpProducer {
    pub fn bind(registry: &Registry, addr: &str, pipe: &str, mode: Mode) -> Result<Self, RpcError> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let producer = registry.producer(pipe, &format!("tcp://{local_addr}"), mode)?;
        let stop = Arc::new(AtomicBool::new(false));
        let connected = Arc::new(AtomicUsize::new(0));
        let writers = Arc::new(Mutex::new(Vec::new()));
        let accept_thread = {
            let (registry, stop, connected, writers) = (registry.clone(), stop.clone(), connected.clone(), writers.clone());
            let pipe = pipe.to_string();
            thread::Builder::new()
                .name(format!("accept-{pipe}"))
                .spawn(move || accept_loop(listener, registry, pipe, mode, stop, connected, writers))?
        };
        Ok(Self {
            producer,
            local_addr,
            stop,
            connected,
            accept_thread: Some(accept_thread),
            writers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn producer(&self) -> &Producer {
        &self.producer
    }

    /// Consumers that completed the hello.
    pub fn connected(&self) -> usize {
        self.connected.load(Ordering::SeqCst)
    }

    pub fn wait_for_consumers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.connected() < n {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(ACCEPT_POLL);
        }
        true
    }

    /// Closes the pipe, lets writers drain their queues, and stops accepting.
    pub fn shutdown(mut self) {
        self.shutdown_inner();
    }

    fn shutdown_inner(&mut self) {
        self.producer.close();
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
        let writers = std::mem::take(&mut *self.writers.lock().unwrap_or_else(|e| e.into_inner()));
        for w in writers {
            let _ = w.join();
        }
    }
}

impl Drop for TcpProducer {
    fn drop(&mut self) {
        self.shutdown_inner();
    }
}

fn accept_loop(
    listener: TcpListener,
    registry: Registry,
    pipe: String,
    mode: Mode,
    stop: Arc<AtomicBool>,
    connected: Arc<AtomicUsize>,
    writers: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let handle = match serve_connection(stream, peer, &registry, &pipe, mode, &connected) {
                    Ok(h) => h,
                    Err(e) => {
                        log::warn!("pipe {pipe}: rejected {peer}: {e}");
                        continue;
                    }
                };
                writers.lock().unwrap_or_else(|e| e.into_inner()).push(handle);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("pipe {pipe}: accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn serve_connection(
    mut stream: TcpStream,
    peer: SocketAddr,
    registry: &Registry,
    pipe: &str,
    mode: Mode,
    connected: &Arc<AtomicUsize>,
) -> Result<JoinHandle<()>, RpcError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let hello = read_one_frame(&mut stream, Duration::from_secs(5))?;
    if hello.name != pipe {
        return Err(RpcError::Invalid(format!("hello for pipe {}, serving {pipe}", hello.name)));
    }
    let hello: Hello = serde_json::from_slice(&hello.payload)
        .map_err(|e| RpcError::Invalid(format!("bad hello payload: {e}")))?;
    let endpoint = if hello.consumer.is_empty() {
        format!("tcp://{peer}")
    } else {
        hello.consumer
    };
    let consumer = registry.consumer(pipe, &endpoint, &hello.job_id, mode)?;
    connected.fetch_add(1, Ordering::SeqCst);
    log::info!("pipe {pipe}: consumer {endpoint} (job {}) connected from {peer}", hello.job_id);
    let name = format!("writer-{pipe}-{peer}");
    Ok(thread::Builder::new().name(name).spawn(move || {
        let mut buf = Vec::new();
        loop {
            match consumer.recv() {
                Recv::Frame(f) => {
                    buf.clear();
                    if let Err(e) = encode_into(&f, &mut buf) {
                        log::error!("encode failed: {e}");
                        continue;
                    }
                    if let Err(e) = stream.write_all(&buf) {
                        // Dropping the consumer removes it from its group.
                        log::warn!("consumer {} lost: {e}", consumer.endpoint());
                        return;
                    }
                }
                Recv::EndOfStream => {
                    let _ = stream.flush();
                    let _ = stream.shutdown(std::net::Shutdown::Write);
                    return;
                }
            }
        }
    })?)
}

/// Consumer endpoint connected to every producer of a pipe.
pub struct TcpConsumer {
    rx: Receiver<Frame>,
    corrupt: Arc<AtomicU64>,
    received: Arc<AtomicU64>,
    readers: Vec<JoinHandle<()>>,
}

impl TcpConsumer {
    /// Dials each producer, retrying until `connect_timeout`.
    pub fn connect(
        producers: &[String],
        pipe: &str,
        job_id: &str,
        consumer_id: &str,
        connect_timeout: Duration,
    ) -> Result<Self, RpcError> {
        let (tx, rx) = bounded(64);
        let corrupt = Arc::new(AtomicU64::new(0));
        let received = Arc::new(AtomicU64::new(0));
        let mut readers = Vec::new();
        for addr in producers {
            let deadline = Instant::now() + connect_timeout;
            let mut stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        log::debug!("connect {addr}: {e}, retrying");
                        thread::sleep(Duration::from_millis(20));
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            stream.set_nodelay(true)?;
            let mut hello = Vec::new();
            encode_into(&hello_frame(pipe, job_id, consumer_id), &mut hello)?;
            stream.write_all(&hello)?;
            let (tx, corrupt, received) = (tx.clone(), corrupt.clone(), received.clone());
            let addr = addr.clone();
            readers.push(thread::Builder::new().name(format!("reader-{addr}")).spawn(move || {
                let mut dec = FrameDecoder::new();
                let mut chunk = vec![0u8; 1 << 16];
                loop {
                    let n = match stream.read(&mut chunk) {
                        Ok(0) => break,
                        Ok(n) => n,
                        Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                        Err(e) => {
                            log::warn!("read from {addr}: {e}");
                            break;
                        }
                    };
                    dec.push(&chunk[..n]);
                    while let Some(r) = dec.next_frame() {
                        match r {
                            Ok(f) => {
                                received.fetch_add(1, Ordering::Relaxed);
                                if tx.send(f).is_err() {
                                    return;
                                }
                            }
                            Err(e) => {
                                corrupt.fetch_add(1, Ordering::Relaxed);
                                log::warn!("from {addr}: {e}");
                            }
                        }
                    }
                }
                if let Err(e) = dec.finish() {
                    corrupt.fetch_add(1, Ordering::Relaxed);
                    log::warn!("from {addr}: {e}");
                }
            })?);
        }
        Ok(Self {
            rx,
            corrupt,
            received,
            readers,
        })
    }

    /// End of stream once every producer connection has closed.
    pub fn recv(&self) -> Recv {
        match self.rx.recv() {
            Ok(f) => Recv::Frame(f),
            Err(_) => Recv::EndOfStream,
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Recv> {
        match self.rx.recv_timeout(timeout) {
            Ok(f) => Some(Recv::Frame(f)),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => None,
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => Some(Recv::EndOfStream),
        }
    }

    pub fn corrupt_frames(&self) -> u64 {
        self.corrupt.load(Ordering::Relaxed)
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    pub fn join(self) {
        drop(self.rx);
        for r in self.readers {
            let _ = r.join();
        }
    }
}

/// Flat byte frame of `size` bytes for demos and load tests.
pub fn filler_frame(pipe: &str, size: usize, fill: u8) -> Frame {
    let mut f = Frame::bytes(pipe, vec![fill; size]);
    f.dtype = DType::Uint8;
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peers_file_parsing() {
        let text = r#"{"pipes":[{"name":"latents","producers":["127.0.0.1:7000"],
            "consumers":[{"addr":"10.0.0.2:0","job_id":"a"}],"mode":"broadcast"}]}"#;
        let p: PeersFile = serde_json::from_str(text).unwrap();
        p.validate().unwrap();
        assert_eq!(p.pipe("latents").unwrap().mode, Mode::Broadcast);
        assert!(p.pipe("other").is_err());
        let bad = text.replace("broadcast", "multicast");
        assert!(serde_json::from_str::<PeersFile>(&bad).is_err());
    }

    #[test]
    fn loopback_broadcast_two_jobs() {
        let reg = Registry::default();
        let server = TcpProducer::bind(&reg, "127.0.0.1:0", "latents", Mode::Broadcast).unwrap();
        let addr = vec![server.local_addr().to_string()];
        let a = TcpConsumer::connect(&addr, "latents", "job-a", "a0", Duration::from_secs(2)).unwrap();
        let b = TcpConsumer::connect(&addr, "latents", "job-b", "b0", Duration::from_secs(2)).unwrap();
        assert!(server.wait_for_consumers(2, Duration::from_secs(2)));
        for i in 0..50u8 {
            server.producer().send(filler_frame("latents", 1000, i)).unwrap();
        }
        server.shutdown();
        for c in [a, b] {
            let mut seqs = Vec::new();
            while let Recv::Frame(f) = c.recv() {
                assert_eq!(f.payload[0], f.seq_no as u8);
                seqs.push(f.seq_no);
            }
            assert_eq!(seqs, (0..50).collect::<Vec<_>>());
            assert_eq!(c.corrupt_frames(), 0);
            c.join();
        }
    }

    #[test]
    fn hello_for_wrong_pipe_rejected() {
        let reg = Registry::default();
        let server = TcpProducer::bind(&reg, "127.0.0.1:0", "latents", Mode::Spray).unwrap();
        let addr = vec![server.local_addr().to_string()];
        let c = TcpConsumer::connect(&addr, "captions", "j", "c", Duration::from_secs(2)).unwrap();
        assert!(!server.wait_for_consumers(1, Duration::from_millis(200)));
        drop(server);
        assert_eq!(c.recv(), Recv::EndOfStream);
    }
}
