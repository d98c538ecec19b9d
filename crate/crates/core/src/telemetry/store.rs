use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventBody, EventRecord, Stage};

pub const SPOOL_SUFFIX: &str = ".events.jsonl";

/// One spool line: the event plus its idempotency key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoolLine {
    pub producer: String,
    pub seq: u64,
    #[serde(flatten)]
    pub event: EventRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventKey {
    pub producer: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quarantined {
    pub file: String,
    pub line: usize,
    pub error: String,
}

/// Append-only event tables keyed by `(producer, seq)`, with lookups by
/// `(rank, iteration)` and by sample source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryStore {
    events: BTreeMap<EventKey, EventRecord>,
    by_rank_iteration: BTreeMap<(u32, u64), BTreeSet<EventKey>>,
    by_source: BTreeMap<String, BTreeSet<EventKey>>,
    quarantine: BTreeSet<Quarantined>,
    duplicates: u64,
}

#[derive(Serialize)]
struct Row<'a> {
    producer: &'a str,
    seq: u64,
    #[serde(flatten)]
    event: &'a EventRecord,
}

#[derive(Serialize)]
struct Export<'a> {
    timer: Vec<Row<'a>>,
    data: Vec<Row<'a>>,
    fault: Vec<Row<'a>>,
    signal: Vec<Row<'a>>,
    quarantine: Vec<&'a Quarantined>,
}

impl TelemetryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one event; `false` if its key was already present.
    pub fn insert(&mut self, key: EventKey, event: EventRecord) -> bool {
        if self.events.contains_key(&key) {
            self.duplicates += 1;
            return false;
        }
        self.by_rank_iteration
            .entry((event.rank, event.iteration))
            .or_default()
            .insert(key.clone());
        if let EventBody::Data { sample_meta } = &event.body {
            self.by_source
                .entry(sample_meta.source_url.clone())
                .or_default()
                .insert(key.clone());
        }
        self.events.insert(key, event);
        true
    }

    /// Parses spool text; bad lines are quarantined with their location.
    pub fn ingest_str(&mut self, origin: &str, text: &str) {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SpoolLine>(line) {
                Ok(l) => {
                    self.insert(
                        EventKey {
                            producer: l.producer,
                            seq: l.seq,
                        },
                        l.event,
                    );
                }
                Err(e) => {
                    self.quarantine.insert(Quarantined {
                        file: origin.to_string(),
                        line: i + 1,
                        error: e.to_string(),
                    });
                }
            }
        }
    }

    pub fn ingest_file(&mut self, path: &Path) -> io::Result<()> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8_lossy(&bytes);
        self.ingest_str(&path.display().to_string(), &text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Lines seen again under an existing key.
    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn quarantine(&self) -> impl Iterator<Item = &Quarantined> {
        self.quarantine.iter()
    }

    pub fn events(&self) -> impl Iterator<Item = (&EventKey, &EventRecord)> {
        self.events.iter()
    }

    pub fn at(&self, rank: u32, iteration: u64) -> impl Iterator<Item = &EventRecord> {
        self.by_rank_iteration
            .get(&(rank, iteration))
            .into_iter()
            .flatten()
            .map(|k| &self.events[k])
    }

    pub fn from_source<'a>(&'a self, source_url: &str) -> impl Iterator<Item = &'a EventRecord> + 'a {
        self.by_source
            .get(source_url)
            .into_iter()
            .flatten()
            .map(|k| &self.events[k])
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.by_source.keys().map(String::as_str)
    }

    /// `(rank, iteration, stage, wall_ns, duration_ns)` for every timer event.
    pub fn timers(&self) -> impl Iterator<Item = (u32, u64, Stage, u64, u64)> + '_ {
        self.events.values().filter_map(|e| match e.body {
            EventBody::Timer { stage, duration_ns } => Some((e.rank, e.iteration, stage, e.wall_ns, duration_ns)),
            _ => None,
        })
    }

    /// Merges another store; keys already present are skipped.
    pub fn extend(&mut self, other: &TelemetryStore) {
        for (k, e) in &other.events {
            self.insert(k.clone(), e.clone());
        }
        self.quarantine.extend(other.quarantine.iter().cloned());
    }

    /// Per-kind JSON tables.
    pub fn export_json(&self) -> serde_json::Value {
        let mut ex = Export {
            timer: Vec::new(),
            data: Vec::new(),
            fault: Vec::new(),
            signal: Vec::new(),
            quarantine: self.quarantine.iter().collect(),
        };
        for (k, e) in &self.events {
            let row = Row {
                producer: &k.producer,
                seq: k.seq,
                event: e,
            };
            match e.body {
                EventBody::Timer { .. } => ex.timer.push(row),
                EventBody::Data { .. } => ex.data.push(row),
                EventBody::Fault { .. } => ex.fault.push(row),
                EventBody::Signal { .. } => ex.signal.push(row),
            }
        }
        serde_json::to_value(&ex).expect("store serializes")
    }
}

/// Loads every `*.events.jsonl` file in `dir`.
pub fn ingest(dir: &Path) -> io::Result<TelemetryStore> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(SPOOL_SUFFIX)))
        .collect();
    files.sort();
    let mut store = TelemetryStore::new();
    for f in files {
        store.ingest_file(&f)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{EventRecord, SampleMeta};

    fn line(producer: &str, seq: u64, e: &EventRecord) -> String {
        serde_json::to_string(&SpoolLine {
            producer: producer.into(),
            seq,
            event: e.clone(),
        })
        .unwrap()
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let store = ingest(dir.path()).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.quarantine().count(), 0);
    }

    #[test]
    fn idempotent_and_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let a: Vec<String> = (0..5)
            .map(|i| line("a", i, &EventRecord::timer(0, i, Stage::Forward, i * 10, 5)))
            .collect();
        let b: Vec<String> = (0..5)
            .map(|i| line("b", i, &EventRecord::timer(1, i, Stage::Forward, i * 10, 6)))
            .collect();
        std::fs::write(dir.path().join("a.events.jsonl"), a.join("\n")).unwrap();
        std::fs::write(dir.path().join("b.events.jsonl"), b.join("\n")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let once = ingest(dir.path()).unwrap();
        assert_eq!(once.len(), 10);
        let mut twice = once.clone();
        twice.ingest_file(&dir.path().join("a.events.jsonl")).unwrap();
        assert_eq!(twice.events().count(), once.events().count());
        assert_eq!(twice.export_json(), once.export_json());

        let mut reversed = TelemetryStore::new();
        reversed.ingest_str("b", &b.join("\n"));
        reversed.ingest_str("a", &a.join("\n"));
        assert_eq!(reversed.export_json(), once.export_json());
        assert_eq!(once.at(1, 3).count(), 1);
    }

    #[test]
    fn corrupt_line_quarantined() {
        let mut lines: Vec<String> = (0..1000)
            .map(|i| line("p", i, &EventRecord::timer(0, i, Stage::Backward, i, 1)))
            .collect();
        lines[417] = "{not json".into();
        let mut store = TelemetryStore::new();
        store.ingest_str("spool.events.jsonl", &lines.join("\n"));
        assert_eq!(store.len(), 999);
        let q: Vec<_> = store.quarantine().collect();
        assert_eq!(q.len(), 1);
        assert_eq!((q[0].file.as_str(), q[0].line), ("spool.events.jsonl", 418));
    }

    #[test]
    fn source_index() {
        let mut store = TelemetryStore::new();
        for (i, url) in ["u1", "u2", "u1"].iter().enumerate() {
            let meta = SampleMeta {
                id: format!("s{i}"),
                frames: 68,
                height: 256,
                width: 256,
                source_url: url.to_string(),
            };
            store.insert(
                EventKey {
                    producer: "p".into(),
                    seq: i as u64,
                },
                EventRecord::data(0, 0, 0, meta),
            );
        }
        assert_eq!(store.from_source("u1").count(), 2);
        assert_eq!(store.sources().collect::<Vec<_>>(), vec!["u1", "u2"]);
        let ex = store.export_json();
        assert_eq!(ex["data"].as_array().unwrap().len(), 3);
        assert_eq!(ex["data"][0]["sample_meta"]["source_url"], "u1");
    }
}
