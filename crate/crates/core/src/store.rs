//! Dual-granularity memory store.
//!
//! Holds Level-2 events, Level-1 summaries with their many-to-one links to
//! events, and the vector index over summary embeddings. On disk a store is a
//! directory:
//!
//! ```text
//! {root}/events.jsonl     one EventUnit per line
//! {root}/summaries.jsonl  {"summary_id","event_id","text"} per line
//! {root}/index.hym1       embeddings (see `index`)
//! {root}/meta.json        format version, dimension, id counters
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::{EventId, EventUnit, SummaryId, SummaryUnit, TurnRange};

pub const FORMAT_VERSION: u32 = 1;
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const INDEX_FILE: &str = "index.hym1";
pub const META_FILE: &str = "meta.json";

const NORM_TOLERANCE: f64 = 1e-6;

/// An event before it has been assigned an id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub dialogue_id: String,
    pub passage: String,
    pub time_label: String,
    pub turn_range: TurnRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRecord {
    summary_id: SummaryId,
    event_id: EventId,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    embedding_dim: usize,
    next_event_id: EventId,
    next_summary_id: SummaryId,
}

/// Marks a point the store can be rolled back to.
#[derive(Debug, Clone, Copy)]
pub struct Checkpoint {
    first_event: EventId,
    first_summary: SummaryId,
    index_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    events: BTreeMap<EventId, EventUnit>,
    summaries: BTreeMap<SummaryId, SummaryRecord>,
    index: VectorIndex,
    next_event_id: EventId,
    next_summary_id: SummaryId,
}

impl MemoryStore {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            events: BTreeMap::new(),
            summaries: BTreeMap::new(),
            index: VectorIndex::new(embedding_dim),
            next_event_id: 0,
            next_summary_id: 0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.index.dimension()
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn summary_count(&self) -> usize {
        self.summaries.len()
    }

    pub fn event(&self, id: EventId) -> Option<&EventUnit> {
        self.events.get(&id)
    }

    pub fn events(&self) -> impl Iterator<Item = &EventUnit> {
        self.events.values()
    }

    pub fn summary(&self, id: SummaryId) -> Option<SummaryUnit> {
        let rec = self.summaries.get(&id)?;
        Some(SummaryUnit {
            summary_id: rec.summary_id,
            event_id: rec.event_id,
            text: rec.text.clone(),
            embedding: self.index.get(id)?.to_vec(),
        })
    }

    pub fn summary_text(&self, id: SummaryId) -> Option<&str> {
        self.summaries.get(&id).map(|r| r.text.as_str())
    }

    pub fn summary_event(&self, id: SummaryId) -> Option<EventId> {
        self.summaries.get(&id).map(|r| r.event_id)
    }

    /// (summary_id, event_id) for every summary, in id order.
    pub fn links(&self) -> impl Iterator<Item = (SummaryId, EventId)> + '_ {
        self.summaries.values().map(|r| (r.summary_id, r.event_id))
    }

    pub fn summaries_of_event(&self, event_id: EventId) -> Vec<SummaryId> {
        self.links()
            .filter(|(_, e)| *e == event_id)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn dialogue_of_summary(&self, id: SummaryId) -> Option<&str> {
        let event = self.summary_event(id)?;
        self.events.get(&event).map(|e| e.dialogue_id.as_str())
    }

    pub fn put_event(&mut self, event: NewEvent) -> Result<EventId> {
        if event.passage.is_empty() {
            return Err(Error::contract("event passage is empty"));
        }
        TurnRange::new(event.turn_range.start, event.turn_range.end)?;
        let event_id = self.next_event_id;
        self.next_event_id += 1;
        self.events.insert(
            event_id,
            EventUnit {
                event_id,
                dialogue_id: event.dialogue_id,
                passage: event.passage,
                time_label: event.time_label,
                turn_range: event.turn_range,
            },
        );
        Ok(event_id)
    }

    /// Stores one summary per text, all linked to `event_id`. Validation runs
    /// before any write, so a rejected call leaves the store unchanged.
    pub fn put_summaries(
        &mut self,
        event_id: EventId,
        texts: &[String],
        embeddings: &[Vec<f32>],
    ) -> Result<Vec<SummaryId>> {
        if !self.events.contains_key(&event_id) {
            return Err(Error::LinkIntegrity(format!("event {event_id} does not exist")));
        }
        if texts.len() != embeddings.len() {
            return Err(Error::contract(format!(
                "{} texts but {} embeddings",
                texts.len(),
                embeddings.len()
            )));
        }
        let dim = self.embedding_dim();
        for (text, emb) in texts.iter().zip(embeddings) {
            if text.is_empty() {
                return Err(Error::contract("summary text is empty"));
            }
            if emb.len() != dim {
                return Err(Error::contract(format!(
                    "embedding dimension {} does not match store dimension {dim}",
                    emb.len()
                )));
            }
            let norm = crate::embedding::dot(emb, emb).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::contract(format!("embedding norm {norm} is not 1")));
            }
        }
        let mut ids = Vec::with_capacity(texts.len());
        for (text, emb) in texts.iter().zip(embeddings) {
            let summary_id = self.next_summary_id;
            self.next_summary_id += 1;
            self.index.insert(summary_id, emb)?;
            self.summaries.insert(
                summary_id,
                SummaryRecord {
                    summary_id,
                    event_id,
                    text: text.clone(),
                },
            );
            ids.push(summary_id);
        }
        Ok(ids)
    }

    /// Resolves summaries to their events, deduplicated by first occurrence.
    pub fn backtrack(&self, summary_ids: &[SummaryId]) -> Result<Vec<&EventUnit>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for id in summary_ids {
            let event_id = self
                .summary_event(*id)
                .ok_or_else(|| Error::LinkIntegrity(format!("summary {id} does not exist")))?;
            if seen.insert(event_id) {
                let event = self.events.get(&event_id).ok_or_else(|| {
                    Error::LinkIntegrity(format!("summary {id} links to missing event {event_id}"))
                })?;
                out.push(event);
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            first_event: self.next_event_id,
            first_summary: self.next_summary_id,
            index_len: self.index.len(),
        }
    }

    /// Removes every record created after `cp`. Id counters are not rewound,
    /// so discarded ids are never handed out again.
    pub fn rollback(&mut self, cp: Checkpoint) {
        self.events.split_off(&cp.first_event);
        self.summaries.split_off(&cp.first_summary);
        self.index.truncate(cp.index_len);
    }

    /// Checks every summary link and that index rows match summaries exactly.
    pub fn verify_integrity(&self) -> Result<()> {
        for rec in self.summaries.values() {
            if !self.events.contains_key(&rec.event_id) {
                return Err(Error::LinkIntegrity(format!(
                    "summary {} links to missing event {}",
                    rec.summary_id, rec.event_id
                )));
            }
            if !self.index.contains(rec.summary_id) {
                return Err(Error::LinkIntegrity(format!(
                    "summary {} has no indexed embedding",
                    rec.summary_id
                )));
            }
        }
        if self.index.len() != self.summaries.len() {
            return Err(Error::LinkIntegrity(format!(
                "index holds {} rows for {} summaries",
                self.index.len(),
                self.summaries.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let mut events = String::new();
        for e in self.events.values() {
            events.push_str(&serde_json::to_string(e).expect("event serializes"));
            events.push('\n');
        }
        let mut summaries = String::new();
        for s in self.summaries.values() {
            summaries.push_str(&serde_json::to_string(s).expect("summary serializes"));
            summaries.push('\n');
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            embedding_dim: self.embedding_dim(),
            next_event_id: self.next_event_id,
            next_summary_id: self.next_summary_id,
        };
        let meta = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        write_replace(&root.join(EVENTS_FILE), events.as_bytes())?;
        write_replace(&root.join(SUMMARIES_FILE), summaries.as_bytes())?;
        write_replace(&root.join(INDEX_FILE), &self.index.to_bytes())?;
        // meta last: a directory with meta.json is a complete store
        write_replace(&root.join(META_FILE), meta.as_bytes())?;
        Ok(())
    }

    pub fn exists(root: &Path) -> bool {
        root.join(META_FILE).is_file()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path)?;
        let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::StoreFormat {
            file: meta_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::StoreFormat {
                file: meta_path,
                line: 1,
                reason: format!("unsupported format version {}", meta.format_version),
            });
        }

        let events_path = root.join(EVENTS_FILE);
        let mut events = BTreeMap::new();
        for (line, e) in read_records::<EventUnit>(&events_path)? {
            let fail = |reason: String| Error::StoreFormat {
                file: events_path.clone(),
                line,
                reason,
            };
            if e.passage.is_empty() {
                return Err(fail("empty passage".into()));
            }
            if e.turn_range.start > e.turn_range.end {
                return Err(fail("turn range start exceeds end".into()));
            }
            if events.insert(e.event_id, e).is_some() {
                return Err(fail("duplicate event id".into()));
            }
        }

        let summaries_path = root.join(SUMMARIES_FILE);
        let mut summaries = BTreeMap::new();
        for (line, s) in read_records::<SummaryRecord>(&summaries_path)? {
            let fail = |reason: String| Error::StoreFormat {
                file: summaries_path.clone(),
                line,
                reason,
            };
            if !events.contains_key(&s.event_id) {
                return Err(fail(format!("links to unknown event {}", s.event_id)));
            }
            if s.text.is_empty() {
                return Err(fail("empty summary text".into()));
            }
            if summaries.insert(s.summary_id, s).is_some() {
                return Err(fail("duplicate summary id".into()));
            }
        }

        let index = VectorIndex::load(&root.join(INDEX_FILE))?;
        if index.dimension() != meta.embedding_dim {
            return Err(Error::IndexFormat {
                offset: 4,
                reason: format!(
                    "index dimension {} disagrees with meta {}",
                    index.dimension(),
                    meta.embedding_dim
                ),
            });
        }

        let next_event_id = events
            .keys()
            .next_back()
            .map_or(0, |m| m + 1)
            .max(meta.next_event_id);
        let next_summary_id = summaries
            .keys()
            .next_back()
            .map_or(0, |m| m + 1)
            .max(meta.next_summary_id);
        let store = MemoryStore {
            events,
            summaries,
            index,
            next_event_id,
            next_summary_id,
        };
        store.verify_integrity()?;
        Ok(store)
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.split_terminator('\n').enumerate() {
        let line = i + 1;
        let record = serde_json::from_str(raw).map_err(|e| Error::StoreFormat {
            file: path.clone(),
            line,
            reason: e.to_string(),
        })?;
        out.push((line, record));
    }
    if !text.is_empty() && !text.ends_with('\n') {
        // a complete record without its newline still signals an interrupted write
        return Err(Error::StoreFormat {
            file: path.clone(),
            line: out.len(),
            reason: "missing final newline".into(),
        });
    }
    Ok(out)
}

fn write_replace(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedder, FallbackEmbedder};

    fn new_event(passage: &str) -> NewEvent {
        NewEvent {
            dialogue_id: "d0".into(),
            passage: passage.into(),
            time_label: "1 May, 2023".into(),
            turn_range: TurnRange { start: 0, end: 1 },
        }
    }

    fn embed_all(dim: usize, texts: &[String]) -> Vec<Vec<f32>> {
        let e = FallbackEmbedder::new(dim);
        texts.iter().map(|t| e.embed(t).unwrap()).collect()
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn event_ids_are_monotonic() {
        let mut s = MemoryStore::new(8);
        assert_eq!(s.put_event(new_event("a: hi")).unwrap(), 0);
        assert_eq!(s.put_event(new_event("b: yo")).unwrap(), 1);
    }

    #[test]
    fn counter_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MemoryStore::new(8);
        for i in 0..8 {
            s.put_event(new_event(&format!("a: line {i}"))).unwrap();
        }
        s.save(dir.path()).unwrap();
        let mut back = MemoryStore::load(dir.path()).unwrap();
        assert_eq!(back.put_event(new_event("a: next")).unwrap(), 8);
    }

    #[test]
    fn put_summaries_links() {
        let mut s = MemoryStore::new(16);
        let e = s.put_event(new_event("a: hi")).unwrap();
        let texts = strings(&["one fact", "two fact", "red fact"]);
        let ids = s.put_summaries(e, &texts, &embed_all(16, &texts)).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        for id in ids {
            assert_eq!(s.summary_event(id), Some(e));
        }
        assert!(s.put_summaries(e, &[], &[]).unwrap().is_empty());
        assert_eq!(s.summary_count(), 3);
    }

    #[test]
    fn put_summaries_unknown_event() {
        let mut s = MemoryStore::new(16);
        let texts = strings(&["x"]);
        assert!(matches!(
            s.put_summaries(99, &texts, &embed_all(16, &texts)),
            Err(Error::LinkIntegrity(_))
        ));
    }

    #[test]
    fn put_summaries_rejects_unnormalized() {
        let mut s = MemoryStore::new(2);
        let e = s.put_event(new_event("a: hi")).unwrap();
        let err = s.put_summaries(e, &strings(&["x"]), &[vec![1.0, 1.0]]);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert_eq!(s.summary_count(), 0);
    }

    #[test]
    fn backtrack_dedups_in_first_occurrence_order() {
        let mut s = MemoryStore::new(16);
        let mut events = Vec::new();
        for i in 0..6 {
            events.push(s.put_event(new_event(&format!("a: {i}"))).unwrap());
        }
        // summaries 0,1 -> event 2; summary 2 -> event 5
        let t2 = strings(&["p", "q"]);
        s.put_summaries(events[2], &t2, &embed_all(16, &t2)).unwrap();
        let t5 = strings(&["r"]);
        s.put_summaries(events[5], &t5, &embed_all(16, &t5)).unwrap();
        let got: Vec<_> = s.backtrack(&[0, 2, 1]).unwrap().iter().map(|e| e.event_id).collect();
        assert_eq!(got, vec![2, 5]);
        assert!(s.backtrack(&[]).unwrap().is_empty());
        assert!(matches!(s.backtrack(&[0, 42]), Err(Error::LinkIntegrity(m)) if m.contains("42")));
        let all = s.summaries_of_event(2);
        let got: Vec<_> = s.backtrack(&all).unwrap().iter().map(|e| e.event_id).collect();
        assert_eq!(got, vec![2]);
    }

    #[test]
    fn rollback_discards_without_reusing_ids() {
        let mut s = MemoryStore::new(16);
        let e = s.put_event(new_event("a: keep")).unwrap();
        let t = strings(&["kept"]);
        s.put_summaries(e, &t, &embed_all(16, &t)).unwrap();
        let before = s.clone();
        let cp = s.checkpoint();
        let e2 = s.put_event(new_event("a: drop")).unwrap();
        let t2 = strings(&["dropped", "also dropped"]);
        s.put_summaries(e2, &t2, &embed_all(16, &t2)).unwrap();
        s.rollback(cp);
        assert_eq!(s.event_count(), before.event_count());
        assert_eq!(s.summary_count(), before.summary_count());
        assert_eq!(s.index(), before.index());
        s.verify_integrity().unwrap();
        assert_eq!(s.put_event(new_event("a: new")).unwrap(), 2);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MemoryStore::new(16);
        for i in 0..2 {
            let e = s.put_event(new_event(&format!("a: event {i}"))).unwrap();
            let texts: Vec<String> = (0..(2 + i)).map(|j| format!("fact {i} {j}")).collect();
            s.put_summaries(e, &texts, &embed_all(16, &texts)).unwrap();
        }
        assert_eq!(s.summary_count(), 5);
        s.save(dir.path()).unwrap();
        let back = MemoryStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.summary(3), s.summary(3));
    }

    #[test]
    fn empty_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = MemoryStore::new(4);
        s.save(dir.path()).unwrap();
        assert_eq!(MemoryStore::load(dir.path()).unwrap(), s);
    }

    #[test]
    fn truncated_summaries_file_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MemoryStore::new(16);
        let e = s.put_event(new_event("a: hi")).unwrap();
        let texts = strings(&["first", "second", "third"]);
        s.put_summaries(e, &texts, &embed_all(16, &texts)).unwrap();
        s.save(dir.path()).unwrap();
        let path = dir.path().join(SUMMARIES_FILE);
        let full = fs::read_to_string(&path).unwrap();
        fs::write(&path, &full[..full.len() - 10]).unwrap();
        match MemoryStore::load(dir.path()) {
            Err(Error::StoreFormat { line, file, .. }) => {
                assert_eq!(line, 3);
                assert!(file.ends_with(SUMMARIES_FILE));
            }
            other => panic!("expected StoreFormat, got {other:?}"),
        }
    }

    #[test]
    fn dangling_link_on_disk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MemoryStore::new(16);
        let e = s.put_event(new_event("a: hi")).unwrap();
        let t = strings(&["x"]);
        s.put_summaries(e, &t, &embed_all(16, &t)).unwrap();
        s.save(dir.path()).unwrap();
        fs::write(dir.path().join(EVENTS_FILE), "").unwrap();
        assert!(matches!(
            MemoryStore::load(dir.path()),
            Err(Error::StoreFormat { line: 1, .. })
        ));
    }
}
