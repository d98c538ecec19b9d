use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ditforge_core::cost_model::Calibration;
use ditforge_core::emulator::SearchReport;
use ditforge_core::load_balancer::BatchPlan;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ditforge"));
    c.env_remove("DITFORGE_LOG");
    c
}

fn here(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ditforge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Compares against a checked-in golden file; `UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = here(&format!("golden/{name}"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(actual, expected, "golden {name} differs");
}

#[test]
fn calibrate_recovers_multiplier() {
    let table = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/flops_table.json");
    let o = run(&["calibrate", "--table", table.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("k=12\n"), "{text}");
    golden("calibrate.txt", &text);

    let o = run(&["calibrate", "--format", "json"]);
    let json = stdout(&o);
    let cal: Calibration = serde_json::from_str(&json).unwrap();
    assert_eq!(cal.coefficients.latent_multiplier_k, 12);
    assert!(cal.max_rel_residual < 0.005);
    golden("calibrate.json", &json);
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["calibrate", "--bogus"][..],
        &["frobnicate"],
        &["emu", "sweep", "--bucket", "204x544"],
        &["emu", "sweep", "--bucket", "204x544x992", "--pin", "color=red"],
        &["pipe", "demo", "--size", "4 furlongs"],
        &["telemetry", "analyze", "--spool", ".", "--stage", "warmup"],
    ] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn plan_alpha_too_large_names_resolution() {
    let manifest = here("fixtures/manifest.jsonl");
    let o = run(&["plan", "--manifest", manifest.to_str().unwrap(), "--target", "204x256x256", "--alpha", "2.0"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("204x256x256") && err.contains("is 0"), "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn plan_matches_golden_and_round_trips() {
    let manifest = here("fixtures/manifest.jsonl");
    let args = [
        "plan",
        "--manifest",
        manifest.to_str().unwrap(),
        "--target",
        "204x256x256",
        "--beta",
        "0.5",
        "--cache",
        "4",
    ];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = stdout(&o);
    golden("plan.json", &json);
    let plan: BatchPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(plan.padded_batches.len(), 3);
    assert_eq!(plan.padded_batches[1].image_ids, ["i0", "i1"]);
    assert_eq!(stdout(&run(&args)), json, "plan is deterministic");
}

#[test]
fn bad_manifest_is_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    std::fs::write(&m, "{\"id\": \"x\", \"frames\": 68}\n").unwrap();
    let o = run(&["plan", "--manifest", m.to_str().unwrap(), "--target", "204x256x256"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("m.jsonl:1"), "{}", stderr(&o));
}

#[test]
fn sweep_text_golden_and_json_round_trip() {
    let space = here("fixtures/pinned_space.json");
    let base = ["emu", "sweep", "--bucket", "204x544x992", "--space", space.to_str().unwrap(), "--pin", "tp=8"];
    let o = run(&[&base[..], &["--format", "text"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    golden("sweep.txt", &stdout(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = run(&[&base[..], &["--out", out.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let report: SearchReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.entries.len(), 3);
    let pinned = report.pinned.unwrap();
    assert_eq!(pinned.config.tp, 8);
    assert!(pinned.gap <= 0.0);
}

#[test]
fn sweep_with_nothing_feasible_still_reports() {
    let cluster = here("fixtures/tiny_hbm_cluster.json");
    let o = run(&["emu", "sweep", "--bucket", "204x544x992", "--cluster", cluster.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: SearchReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report.entries.is_empty());
    assert!(!report.infeasible.is_empty());
    assert!(report.infeasible.iter().all(|e| !e.reason.is_empty()));
}

#[test]
fn pipe_demo_broadcast_and_spray() {
    for tcp in [false, true] {
        let mut args = vec!["pipe", "demo", "--frames", "120", "--size", "1KiB"];
        if tcp {
            args.push("--tcp");
        }
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        for job in ["job-a", "job-b"] {
            assert_eq!(v["jobs"][job]["frames"], 120, "{v}");
            assert_eq!(v["jobs"][job]["gap_free"], true);
        }
        assert_eq!(v["metrics"]["produced"], 120);
    }
    let o = run(&["pipe", "demo", "--frames", "99", "--size", "16", "--mode", "spray", "--jobs", "1", "--consumers", "3"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["union_gap_free"], true);
    for c in v["consumers"].as_array().unwrap() {
        assert_eq!(c["frames"], 33);
    }
}

#[test]
fn pipe_produce_consume_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let peers = dir.path().join("peers.json");
    std::fs::write(
        &peers,
        format!(
            r#"{{"pipes":[{{"name":"latents","producers":["127.0.0.1:{port}"],
            "consumers":[{{"addr":"trainer-a","job_id":"a"}},{{"addr":"trainer-b","job_id":"b"}}],"mode":"broadcast"}}]}}"#
        ),
    )
    .unwrap();
    let p = peers.to_str().unwrap();
    let producer = bin()
        .args(["pipe", "produce", "--peers", p, "--pipe", "latents", "--count", "30", "--size", "64KiB", "--rate", "500/s"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let consumers: Vec<_> = ["0", "1"]
        .into_iter()
        .map(|i| {
            bin()
                .args(["pipe", "consume", "--peers", p, "--pipe", "latents", "--index", i])
                .stdout(std::process::Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for c in consumers {
        let o = c.wait_with_output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["received"], 30);
        assert_eq!(v["mismatched"], 0);
        assert_eq!(v["corrupt"], 0);
        assert_eq!(v["last_seq"], 29);
    }
    let o = producer.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["consumers"], 2);
}

#[test]
fn telemetry_synth_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().to_str().unwrap();
    let synth = ["telemetry", "synth", "--out", spool, "--ranks", "6", "--iterations", "20", "--straggler", "4", "--seed", "9", "--fault-rate", "0.2"];
    let o = run(&synth);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read_to_string(dir.path().join("rank0000.events.jsonl")).unwrap();
    run(&synth);
    let second = std::fs::read_to_string(dir.path().join("rank0000.events.jsonl")).unwrap();
    assert_eq!(first, second, "synth is deterministic and replaces its spool");

    let signals = dir.path().join("signals.json");
    std::fs::write(&signals, r#"["traffic_disrupted", "logs_stale"]"#).unwrap();
    let o = run(&[
        "telemetry",
        "analyze",
        "--spool",
        spool,
        "--stragglers",
        "--stage",
        "backward",
        "--k",
        "6",
        "--effective-time",
        "--data-stats",
        "--failures",
        "--restart-check",
        signals.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stragglers"]["flagged"], serde_json::json!([4]));
    assert_eq!(v["effective_time"]["iterations"], 20);
    assert_eq!(v["data_stats"]["samples"], 6 * 20 * 2);
    assert_eq!(v["restart"]["decision"], "restart");
    assert!(v["failures"]["faults"].as_u64().unwrap() > 0);

    let o = run(&["telemetry", "analyze", "--spool", spool, "--stragglers", "--iterations", "0..2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("insufficient data"), "{}", stderr(&o));
}

#[test]
fn analyze_empty_spool() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["telemetry", "analyze", "--spool", dir.path().to_str().unwrap(), "--data-stats"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["events"], 0);
    let o = run(&["telemetry", "analyze", "--spool", dir.path().to_str().unwrap(), "--effective-time"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn log_level_from_environment() {
    let o = bin().env("DITFORGE_LOG", "info").args(["calibrate", "--out", "/dev/null"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("wrote /dev/null"), "{}", stderr(&o));
    let o = run(&["calibrate", "--out", "/dev/null"]);
    assert!(o.stderr.is_empty());
}
