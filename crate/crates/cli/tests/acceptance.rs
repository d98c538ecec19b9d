//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p ditforge --test acceptance`.

use std::collections::BTreeSet;
use std::hint::black_box;
use std::thread;
use std::time::{Duration, Instant};

use ditforge_core::cost_model::{calibrate, memory_breakdown, vae_halo, ActivationModel, FlopsTable, VaeSpec};
use ditforge_core::emulator::{
    closed_form_bubble, mfu, search_configs, simulate_pipeline, EmulatorOptions, PinSpec, SearchSpace,
};
use ditforge_core::load_balancer::{brute_force_pad, coarse_batch_sizes, greedy_pad};
use ditforge_core::model_spec::{
    derive_latent_shape, BucketRequest, ClusterSpec, CpMode, LatentTable, ModelSpec, ParallelismConfig, DEFAULT_PATCH,
};
use ditforge_core::pipeline_rpc::{
    decode_frame, encode_frame, model_transfer, pipelined_transfer, DType, Frame, FrameDecoder, Mode, Recv, Registry,
};
use ditforge_core::telemetry::{
    detect_stragglers, effective_training_time, failure_stats, restart_decision, Decision, EventKey, EventRecord,
    FaultClass, Recorder, RecorderConfig, SignalName, Stage, TelemetryStore,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Calibration: every row predicted within this relative error.
const CAL_MAX_REL: f64 = 0.005;
const CAL_RUNTIME_S: f64 = 1.0;
/// Values the criteria call exact are compared to within f64 rounding.
const EXACT: f64 = 1e-12;
/// Padding values carry two decimals; sums of them are compared to this.
const PAD_EXACT: f64 = 1e-9;
const PAD_RANDOM_INSTANCES: usize = 200;
const PAD_RUNTIME_S: f64 = 10.0;
const PARAMS_GRADS_GB: f64 = 22.5;
const PP_SAVING_GB: (f64, f64) = (15.0, 25.0);
const ACTIVATION_REF_GB: f64 = 120.0;
const ACTIVATION_BAND: f64 = 0.30;
const ROUND_TRIP_FRAMES: usize = 10_000;
const CHAOS_RUNS: u64 = 20;
const STRAGGLER_TRIALS: u64 = 100;
const RECORD_OVERHEAD_MAX: f64 = 0.02;
const OVERHEAD_ITERATIONS: u64 = 10_000;
const OVERHEAD_BLOCKS: u64 = 20;
const HALO_RATIO_MAX: f64 = 0.01;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    /// Every attainable part passes; the rest is shown to be unattainable.
    Partial,
    Fail,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn flops_calibration() -> Outcome {
    let t = Instant::now();
    let cal = match calibrate(&FlopsTable::bundled()) {
        Ok(c) => c,
        Err(e) => return check(false, format!("calibration error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let k = cal.coefficients.latent_multiplier_k;
    check(
        k == 12 && cal.max_rel_residual < CAL_MAX_REL && secs < CAL_RUNTIME_S,
        format!(
            "k={k} (want 12), max residual {:.4}% (< {:.1}%), {:.1} ms (< {CAL_RUNTIME_S} s)",
            cal.max_rel_residual * 100.0,
            CAL_MAX_REL * 100.0,
            secs * 1e3
        ),
    )
}

fn coarse_batches() -> Outcome {
    let sizes = coarse_batch_sizes(&FlopsTable::bundled(), BucketRequest::new(204, 256, 256), 1.0);
    match sizes {
        Ok(s) => {
            let b: Vec<u64> = s.iter().map(|r| r.batch_size).collect();
            check(b == [1, 1, 1, 1, 3, 3, 38], format!("B = {b:?} (want [1, 1, 1, 1, 3, 3, 38])"))
        }
        Err(e) => check(false, e.to_string()),
    }
}

fn greedy_padding() -> Outcome {
    let t = Instant::now();
    let worked = greedy_pad(&[1717.20, 1004.89, 509.31], 4, 44.99);
    let finals: Vec<f64> = worked.batches.iter().map(|b| b.final_flops).collect();
    let trace_ok = finals
        .iter()
        .zip([1717.20, 1004.89, 689.27])
        .all(|(got, want)| (got - want).abs() < PAD_EXACT);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..PAD_RANDOM_INSTANCES {
        let n = rng.gen_range(1..=6);
        let bases: Vec<f64> = (0..n).map(|_| (rng.gen_range(5_000..200_000) as f64) / 100.0).collect();
        let images = rng.gen_range(0..=10);
        let image_flops = rng.gen_range(1_000..10_000) as f64 / 100.0;
        let greedy = greedy_pad(&bases, images, image_flops).max_load();
        let (opt, _) = brute_force_pad(&bases, images, image_flops).expect("oracle-sized");
        let excess = (greedy - opt) / image_flops;
        worst_excess = worst_excess.max(excess);
        if greedy > opt + image_flops + PAD_EXACT {
            violations += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        trace_ok && violations == 0 && secs < PAD_RUNTIME_S,
        format!(
            "worked trace finals {finals:.2?}; {PAD_RANDOM_INSTANCES} random instances, {violations} above optimum + image \
             (worst {worst_excess:.3} images over), {secs:.2} s"
        ),
    )
}

fn pipeline_schedule() -> Outcome {
    let (mut attainable, mut exact, mut beyond, mut above, mut m1_bound) = (0, 0, 0, 0, 0);
    let mut worst = 0.0f64;
    for pp in 1..=4u32 {
        for vpp in 1..=2u32 {
            for m in 1..=16u32 {
                let sim = simulate_pipeline(pp, vpp, m, 1.0, 2.0).bubble_fraction;
                let cf = closed_form_bubble(pp, vpp, m);
                if vpp == 1 || m % pp == 0 {
                    attainable += 1;
                    exact += ((sim - cf).abs() <= EXACT) as u32;
                    worst = worst.max((sim - cf).abs());
                } else {
                    beyond += 1;
                    above += (sim > cf) as u32;
                    // One micro-batch is a single dependency chain through all
                    // pp*vpp virtual stages, so no schedule beats (pp-1)/pp.
                    if m == 1 {
                        let bound = (pp - 1) as f64 / pp as f64;
                        m1_bound += ((sim - bound).abs() <= EXACT && cf < bound) as u32;
                    }
                }
            }
        }
    }
    let sched_ok = exact == attainable && above == beyond;

    // Substituted emulator property: ranking consistent with estimates,
    // dominated configurations strictly lower, pinned gap reported.
    let model = ModelSpec::default();
    let cluster = ClusterSpec::default();
    let bucket = derive_latent_shape(BucketRequest::new(204, 544, 992), &LatentTable::default(), DEFAULT_PATCH)
        .expect("bucket");
    let opts = EmulatorOptions::default();
    let pin: PinSpec = "tp=8,sp=1,zero1=1".parse().expect("pin");
    let report = search_configs(&model, &cluster, &bucket, &SearchSpace::default(), Some(&pin), &opts).expect("sweep");
    let sorted = report.entries.windows(2).all(|w| w[0].estimate.mfu >= w[1].estimate.mfu);
    let consistent = report.entries.iter().all(|e| {
        mfu(e.estimate.useful_tflops, e.estimate.iteration_s, &cluster)
            .is_ok_and(|v| (v - e.estimate.mfu).abs() <= EXACT)
    });
    let cp_space = SearchSpace {
        cp: vec![2, 4],
        cp_cross_attn_modes: vec![CpMode::HeadWise, CpMode::SequenceWise],
        ..SearchSpace::default()
    };
    let cp_report = search_configs(&model, &cluster, &bucket, &cp_space, None, &opts).expect("sweep");
    let position = |cfg: &ParallelismConfig| cp_report.entries.iter().position(|e| &e.config == cfg);
    let (mut pairs, mut lower) = (0, 0);
    for (i, e) in cp_report.entries.iter().enumerate() {
        if e.config.cp_cross_attn_mode != CpMode::HeadWise {
            continue;
        }
        let twin = ParallelismConfig {
            cp_cross_attn_mode: CpMode::SequenceWise,
            ..e.config.clone()
        };
        if let Some(j) = position(&twin) {
            pairs += 1;
            lower += (j < i && cp_report.entries[j].estimate.mfu > e.estimate.mfu) as u32;
        }
    }
    let gap = report.pinned.as_ref().map(|p| p.gap);
    let search_ok = sorted && consistent && pairs > 0 && lower == pairs && gap.is_some_and(|g| g <= 0.0);

    let detail = format!(
        "closed form exact at {exact}/{attainable} attainable points (vpp=1 or m%pp=0, max |diff| {worst:.1e}); \
         {above}/{beyond} interleaved points with m%pp!=0 simulate above it and the closed form is unattainable there \
         ({m1_bound} m=1 points sit on the (pp-1)/pp dependency bound); emulator: {} ranked, order consistent={}, \
         {lower}/{pairs} head-wise cross-attention configs below their sequence-wise twin, pinned gap {:+.2}%; \
         absolute MFU figures not reproducible at desk scale",
        report.entries.len(),
        sorted && consistent,
        gap.unwrap_or(f64::NAN) * 100.0
    );
    Outcome {
        status: match (sched_ok && search_ok, beyond) {
            (false, _) => Status::Fail,
            (true, 0) => Status::Pass,
            (true, _) => Status::Partial,
        },
        detail,
    }
}

fn memory_model() -> Outcome {
    let model = ModelSpec::default();
    let bucket = derive_latent_shape(BucketRequest::new(204, 544, 992), &LatentTable::default(), DEFAULT_PATCH)
        .expect("bucket");
    let act = ActivationModel::default();
    let tp8 = ParallelismConfig {
        tp: 8,
        sp: true,
        ..Default::default()
    };
    let pp8 = ParallelismConfig { pp: 8, ..tp8.clone() };
    let a = memory_breakdown(&model, &tp8, &bucket, &act);
    let b = memory_breakdown(&model, &pp8, &bucket, &act);
    let pg = a.params_gb + a.grads_gb;
    let saving = pg - (b.params_gb + b.grads_gb);
    let act_rel = a.activations_gb / ACTIVATION_REF_GB - 1.0;
    check(
        (pg - PARAMS_GRADS_GB).abs() < EXACT
            && (PP_SAVING_GB.0..=PP_SAVING_GB.1).contains(&saving)
            && act_rel.abs() <= ACTIVATION_BAND,
        format!(
            "params+grads {pg:.2} GB at tp=8 (want 22.5); pp->8 saves {saving:.2} GB (band {:?}); activations \
             {:.1} GB vs 120 GB ({:+.0}%, band +/-30%) assuming 204x544x992 ({} tokens), 34*hidden bytes/token/layer, \
             48 layers, tp=8 with sequence parallel, no checkpointing, one sample",
            PP_SAVING_GB,
            a.activations_gb,
            act_rel * 100.0,
            bucket.tokens()
        ),
    )
}

fn random_frame(rng: &mut ChaCha8Rng, seq: u64) -> Frame {
    let dtype = DType::ALL[rng.gen_range(0..DType::ALL.len())];
    let ndim = rng.gen_range(0..=4);
    let shape: Vec<u64> = (0..ndim).map(|_| rng.gen_range(0..=6)).collect();
    let elems: u64 = shape.iter().product();
    let mut payload = vec![0u8; (elems as usize) * dtype.size()];
    rng.fill(&mut payload[..]);
    let name_len = rng.gen_range(1..=24);
    let name: String = (0..name_len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    Frame::new(name, seq, dtype, shape, payload).expect("consistent frame")
}

/// Runs a broadcast pipe with job `a` and `b` consumers; each `a` consumer quits
/// after the given number of frames. Returns job `b`'s sorted sequence numbers.
fn broadcast_with_kills(frames: u64, b_consumers: usize, a_kills: &[u64]) -> Vec<u64> {
    let reg = Registry::default();
    let producer = reg.producer("latents", "p", Mode::Broadcast).expect("producer");
    let mut a_handles = Vec::new();
    for (i, &kill_at) in a_kills.iter().enumerate() {
        let c = reg.consumer("latents", &format!("a{i}"), "a", Mode::Broadcast).expect("consumer");
        a_handles.push(thread::spawn(move || {
            let mut got = 0;
            while got < kill_at {
                match c.recv() {
                    Recv::Frame(_) => got += 1,
                    Recv::EndOfStream => break,
                }
            }
        }));
    }
    let b_handles: Vec<_> = (0..b_consumers)
        .map(|i| {
            let c = reg.consumer("latents", &format!("b{i}"), "b", Mode::Broadcast).expect("consumer");
            thread::spawn(move || c.frames().map(|f| f.seq_no).collect::<Vec<_>>())
        })
        .collect();
    for i in 0..frames {
        producer.send(Frame::bytes("latents", vec![i as u8; 64])).expect("send");
    }
    producer.close();
    for h in a_handles {
        h.join().expect("a consumer");
    }
    let mut seqs: Vec<u64> = b_handles.into_iter().flat_map(|h| h.join().expect("b consumer")).collect();
    seqs.sort_unstable();
    seqs
}

fn data_plane() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut stream = Vec::new();
    let mut originals = Vec::with_capacity(ROUND_TRIP_FRAMES);
    let mut rt_fail = 0;
    for i in 0..ROUND_TRIP_FRAMES {
        let f = random_frame(&mut rng, i as u64);
        let bytes = encode_frame(&f).expect("encodable");
        rt_fail += (decode_frame(&bytes).as_ref() != Ok(&f)) as u32;
        stream.extend_from_slice(&bytes);
        originals.push(f);
    }
    let mut dec = FrameDecoder::new();
    let mut streamed = Vec::new();
    for piece in stream.chunks(4093) {
        dec.push(piece);
        while let Some(r) = dec.next_frame() {
            streamed.push(r);
        }
    }
    let stream_ok = dec.finish().is_ok()
        && streamed.len() == originals.len()
        && streamed.iter().zip(&originals).all(|(r, f)| r.as_ref() == Ok(f));
    let a = rt_fail == 0 && stream_ok;

    let reg = Registry::default();
    let producer = reg.producer("work", "p", Mode::Spray).expect("producer");
    let handles: Vec<_> = (0..3)
        .map(|i| {
            let c = reg.consumer("work", &format!("c{i}"), "j", Mode::Spray).expect("consumer");
            thread::spawn(move || c.frames().count())
        })
        .collect();
    for _ in 0..999 {
        producer.send(Frame::bytes("work", vec![0; 8])).expect("send");
    }
    producer.close();
    let counts: Vec<usize> = handles.into_iter().map(|h| h.join().expect("consumer")).collect();
    let b = counts == [333, 333, 333];

    let full: Vec<u64> = (0..1000).collect();
    let c = broadcast_with_kills(1000, 1, &[u64::MAX]) == full;

    let mut chaos_ok = 0;
    for seed in 0..CHAOS_RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kills: Vec<u64> = (0..2).map(|_| rng.gen_range(0..500)).collect();
        let b_consumers = rng.gen_range(1..=3);
        let want: Vec<u64> = (0..500).collect();
        chaos_ok += (broadcast_with_kills(500, b_consumers, &kills) == want) as u32;
    }
    let d = chaos_ok == CHAOS_RUNS as u32;

    let m = model_transfer(8, 1e-3, 1e-3);
    let e = (m.pipelined_s - 9e-3).abs() < EXACT && (m.store_and_forward_s - 16e-3).abs() < EXACT;
    let payload = vec![7u8; 64 << 20];
    let loopback = match pipelined_transfer(&payload, 4 << 20) {
        Ok(r) => format!(
            "loopback 64 MiB: pipelined {:.2} GB/s, store-and-forward {:.2} GB/s (reported only)",
            r.pipelined_gbps, r.store_and_forward_gbps
        ),
        Err(err) => format!("loopback transfer unavailable: {err}"),
    };
    check(
        a && b && c && d && e,
        format!(
            "(a) {ROUND_TRIP_FRAMES} random frames, {rt_fail} round-trip failures, streamed decode ok={stream_ok}; \
             (b) spray 999 -> {counts:?}; (c) broadcast complete={c}; (d) {chaos_ok}/{CHAOS_RUNS} chaos runs left job b \
             complete; (e) 8 chunks {:.0} ms pipelined vs {:.0} ms; {loopback}",
            m.pipelined_s * 1e3,
            m.store_and_forward_s * 1e3
        ),
    )
}

fn insert_all(events: impl IntoIterator<Item = EventRecord>) -> TelemetryStore {
    let mut store = TelemetryStore::new();
    for (seq, e) in events.into_iter().enumerate() {
        store.insert(
            EventKey {
                producer: "fixture".into(),
                seq: seq as u64,
            },
            e,
        );
    }
    store
}

fn backward_trial(seed: u64, straggler: Option<u32>) -> Vec<EventRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for it in 0..20u64 {
        for rank in 0..8u32 {
            let mut s = 2.0 * (1.0 + rng.gen_range(-0.05..=0.05));
            if Some(rank) == straggler {
                s *= 1.5;
            }
            events.push(EventRecord::timer(rank, it, Stage::Backward, it * 10_000_000_000, (s * 1e9) as u64));
        }
    }
    events
}

/// Host-side loop of a GPU-bound trainer: a little CPU work per stage, then a
/// wait standing in for the device.
fn synthetic_loop(iterations: u64, recorder: Option<&Recorder>) -> f64 {
    let t0 = Instant::now();
    for it in 0..iterations {
        for stage in Stage::ALL {
            let start = t0.elapsed().as_nanos() as u64;
            let mut acc = it;
            for j in 0..400u64 {
                acc = black_box(acc.wrapping_mul(6364136223846793005).wrapping_add(j));
            }
            thread::sleep(Duration::from_micros(40));
            if let Some(r) = recorder {
                let end = t0.elapsed().as_nanos() as u64;
                r.record(EventRecord::timer(0, it, stage, start, end - start));
            }
        }
    }
    t0.elapsed().as_secs_f64()
}

fn telemetry() -> Outcome {
    let (mut detected, mut false_pos) = (0, 0);
    for seed in 0..STRAGGLER_TRIALS {
        let rank = (seed % 8) as u32;
        let noisy = insert_all(backward_trial(seed, Some(rank)));
        let clean = insert_all(backward_trial(seed + 10_000, None));
        let r = detect_stragglers(&noisy, None, Stage::Backward, 6.0).expect("enough data");
        detected += (r.flagged.contains(&rank)) as u32;
        false_pos += r.flagged.iter().filter(|&&f| f != rank).count() as u32;
        let r = detect_stragglers(&clean, None, Stage::Backward, 6.0).expect("enough data");
        false_pos += r.flagged.len() as u32;
    }
    let a = detected == STRAGGLER_TRIALS as u32 && false_pos == 0;

    let hour = 3_600_000_000_000u64;
    let mut events: Vec<EventRecord> = (0..99)
        .map(|i| EventRecord::timer(0, i, Stage::Forward, i * hour, hour))
        .collect();
    events.push(EventRecord::signal(0, 99, 100 * hour, SignalName::LogsStale, false));
    let eff = effective_training_time(&insert_all(events)).map(|e| e.fraction);
    let b = eff == Ok(0.99);

    let mut table_ok = 0;
    for mask in 0..8u32 {
        let set: BTreeSet<SignalName> = SignalName::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| s)
            .collect();
        let want = if set.len() >= 2 { Decision::Restart } else { Decision::Continue };
        table_ok += (restart_decision(&set, 2) == Ok(want)) as u32;
    }
    let c = table_ok == 8;

    // Paired blocks in alternating order, so drift on a shared core cancels;
    // the instrumented side totals OVERHEAD_ITERATIONS.
    let dir = tempfile::tempdir().expect("tempdir");
    let block = OVERHEAD_ITERATIONS / OVERHEAD_BLOCKS;
    let mut ratios = Vec::with_capacity(OVERHEAD_BLOCKS as usize);
    let mut shed = 0;
    for i in 0..OVERHEAD_BLOCKS {
        let rec = Recorder::open(RecorderConfig::new(dir.path(), format!("loop{i}"))).expect("recorder");
        let (base, with) = if i % 2 == 0 {
            let b = synthetic_loop(block, None);
            (b, synthetic_loop(block, Some(&rec)))
        } else {
            let w = synthetic_loop(block, Some(&rec));
            (synthetic_loop(block, None), w)
        };
        shed += rec.close().expect("close").shed;
        ratios.push(with / base - 1.0);
    }
    ratios.sort_by(f64::total_cmp);
    let overhead = (ratios[ratios.len() / 2 - 1] + ratios[ratios.len() / 2]) / 2.0;
    let d = overhead < RECORD_OVERHEAD_MAX && shed == 0;

    let faults: Vec<EventRecord> = (0..1000u64)
        .map(|i| EventRecord::fault(0, i, i, if i < 862 { FaultClass::Fatal } else { FaultClass::NonFatal }, false))
        .collect();
    let fs = failure_stats(&insert_all(faults)).expect("faults");
    let e = (fs.fatal_fraction, fs.non_fatal_fraction) == (0.862, 0.138);

    check(
        a && b && c && d && e,
        format!(
            "(a) {detected}/{STRAGGLER_TRIALS} stragglers found, {false_pos} false positives over {STRAGGLER_TRIALS} \
             injected + {STRAGGLER_TRIALS} clean trials; (b) effective time {eff:?} (want 0.99); (c) quorum truth table \
             {table_ok}/8; (d) recording overhead {:+.2}% (median of {OVERHEAD_BLOCKS} paired blocks, {OVERHEAD_ITERATIONS} \
             recorded iterations, < 2%), {shed} shed; (e) failure \
             split ({}, {}) (want (0.862, 0.138))",
            overhead * 100.0,
            fs.fatal_fraction,
            fs.non_fatal_fraction
        ),
    )
}

fn vae_halo_ratio() -> Outcome {
    let r = vae_halo(&VaeSpec::default(), &ClusterSpec::default(), EmulatorOptions::default().kernel_efficiency);
    check(
        r.ratio < HALO_RATIO_MAX,
        format!(
            "halo {:.3} ms / conv {:.1} ms = {:.3}% (< 1%); assumptions: {}",
            r.halo_time_s * 1e3,
            r.conv_time_s * 1e3,
            r.ratio * 100.0,
            r.assumptions.join("; ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("FLOPs-table calibration", flops_calibration),
        ("coarse batch sizes", coarse_batches),
        ("greedy padding", greedy_padding),
        ("pipeline schedule and emulator ranking", pipeline_schedule),
        ("memory model", memory_model),
        ("data plane", data_plane),
        ("telemetry", telemetry),
        ("VAE halo", vae_halo_ratio),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Partial => "PARTIAL",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("[{tag}] {} {name} ({:.2} s): {}", i + 1, t.elapsed().as_secs_f64(), o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
