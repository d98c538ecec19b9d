//! Chunked staging-copy / send overlap for large payloads.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Instant;

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

/// Finish time of a two-stage pipeline: chunk `k` is copied after chunk `k-1`,
/// and sent once both its copy and the previous send are done.
pub fn pipeline_recurrence(copy_s: &[f64], send_s: &[f64]) -> f64 {
    let mut copy_end = 0.0;
    let mut send_end: f64 = 0.0;
    for (c, s) in copy_s.iter().zip(send_s) {
        copy_end += c;
        send_end = send_end.max(copy_end) + s;
    }
    send_end
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeledTransfer {
    pub chunks: usize,
    pub pipelined_s: f64,
    pub store_and_forward_s: f64,
}

/// Uniform per-chunk copy and send costs.
pub fn model_transfer(chunks: usize, copy_s_per_chunk: f64, send_s_per_chunk: f64) -> ModeledTransfer {
    ModeledTransfer {
        chunks,
        pipelined_s: pipeline_recurrence(&vec![copy_s_per_chunk; chunks], &vec![send_s_per_chunk; chunks]),
        store_and_forward_s: chunks as f64 * (copy_s_per_chunk + send_s_per_chunk),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub bytes: usize,
    pub chunk_size: usize,
    pub chunks: usize,
    pub pipelined_s: f64,
    pub store_and_forward_s: f64,
    pub pipelined_gbps: f64,
    pub store_and_forward_gbps: f64,
}

fn sink(listener: TcpListener, expect: usize) -> thread::JoinHandle<io::Result<usize>> {
    thread::spawn(move || {
        let (mut s, _) = listener.accept()?;
        let mut buf = vec![0u8; 1 << 20];
        let mut got = 0;
        while got < expect {
            let n = s.read(&mut buf)?;
            if n == 0 {
                break;
            }
            got += n;
        }
        s.write_all(&[1])?;
        Ok(got)
    })
}

fn finish(mut stream: TcpStream, handle: thread::JoinHandle<io::Result<usize>>, expect: usize) -> io::Result<()> {
    let mut ack = [0u8; 1];
    stream.read_exact(&mut ack)?;
    let got = handle.join().map_err(|_| io::Error::other("sink panicked"))??;
    if got != expect {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, format!("sink got {got} of {expect} bytes")));
    }
    Ok(())
}

fn loopback(expect: usize) -> io::Result<(TcpStream, thread::JoinHandle<io::Result<usize>>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = sink(listener, expect);
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok((stream, handle))
}

fn store_and_forward(payload: &[u8]) -> io::Result<f64> {
    let (mut stream, handle) = loopback(payload.len())?;
    let t = Instant::now();
    let staging = payload.to_vec();
    stream.write_all(&staging)?;
    finish(stream, handle, payload.len())?;
    Ok(t.elapsed().as_secs_f64())
}

fn pipelined(payload: &[u8], chunk_size: usize) -> io::Result<f64> {
    let (mut stream, handle) = loopback(payload.len())?;
    let t = Instant::now();
    // Two staging buffers cycle between the copier and the sender.
    let (full_tx, full_rx) = bounded::<Vec<u8>>(2);
    let (free_tx, free_rx) = bounded::<Vec<u8>>(2);
    for _ in 0..2 {
        free_tx.send(Vec::with_capacity(chunk_size)).expect("open channel");
    }
    thread::scope(|scope| -> io::Result<()> {
        scope.spawn(move || {
            for chunk in payload.chunks(chunk_size) {
                let Ok(mut buf) = free_rx.recv() else { return };
                buf.clear();
                buf.extend_from_slice(chunk);
                if full_tx.send(buf).is_err() {
                    return;
                }
            }
        });
        for buf in full_rx.iter() {
            stream.write_all(&buf)?;
            // The copier may already be done; a closed free list is fine.
            let _ = free_tx.send(buf);
        }
        Ok(())
    })?;
    finish(stream, handle, payload.len())?;
    Ok(t.elapsed().as_secs_f64())
}

/// Measures a loopback transfer of `payload` both ways.
pub fn pipelined_transfer(payload: &[u8], chunk_size: usize) -> io::Result<TransferReport> {
    if chunk_size == 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "chunk_size must be > 0"));
    }
    let chunks = payload.len().div_ceil(chunk_size).max(1);
    let store_and_forward_s = store_and_forward(payload)?;
    let pipelined_s = pipelined(payload, chunk_size)?;
    let gbps = |s: f64| if s > 0.0 { payload.len() as f64 / s / 1e9 } else { 0.0 };
    Ok(TransferReport {
        bytes: payload.len(),
        chunk_size,
        chunks,
        pipelined_s,
        store_and_forward_s,
        pipelined_gbps: gbps(pipelined_s),
        store_and_forward_gbps: gbps(store_and_forward_s),
    })
}
