//! Interaction datasets: ingestion, temporal splitting, warm/cold tagging,
//! and a planted-structure generator.
//!
//! A dataset directory holds three files:
//!
//! * `interactions.tsv`: `user_id item_id rating timestamp label split cold`
//! * `items.tsv`: `item_id title`
//! * `manifest.json`: counts per split, cold statistics and a content hash

mod ingest;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ingest::{binarize, ingest, IngestConfig, TimeWindow};
pub use split::{tag_warm_cold, temporal_split};
pub use synth::{synth_generate, SynthConfig, CLUSTER_WORDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One labeled interaction. `user` and `item` are dense row indices into the
/// dataset's `user_ids` / `items`.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub timestamp: i64,
    pub label: u8,
    pub split: Split,
    pub cold: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: i64,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    /// Raw user ids, indexed by dense user row.
    pub user_ids: Vec<i64>,
    /// Item catalog, indexed by dense item row.
    pub items: Vec<Item>,
    /// Chronologically sorted; ties keep their input order.
    pub interactions: Vec<Interaction>,
    /// Per-user interaction indices in chronological order.
    pub history: Vec<Vec<usize>>,
    /// Position of each interaction within its user's history.
    history_pos: Vec<usize>,
    pub split_assigned: bool,
}

impl InteractionDataset {
    /// Builds a dataset from raw records: sorts chronologically (stable),
    /// assigns dense ids in ascending raw-id order and indexes histories.
    /// Only items referenced by at least one interaction are kept.
    pub fn from_records(records: Vec<RawRecord>, titles: &HashMap<i64, String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset { stage: "construction" });
        }
        let users: BTreeSet<i64> = records.iter().map(|r| r.user_id).collect();
        let items: BTreeSet<i64> = records.iter().map(|r| r.item_id).collect();
        let user_ids: Vec<i64> = users.into_iter().collect();
        let item_ids: Vec<i64> = items.into_iter().collect();
        let urow: HashMap<i64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let irow: HashMap<i64, usize> = item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let items = item_ids
            .iter()
            .map(|&id| Item {
                id,
                title: titles.get(&id).cloned().unwrap_or_default(),
            })
            .collect();
        let mut records = records;
        records.sort_by_key(|r| r.timestamp);
        let interactions = records
            .into_iter()
            .map(|r| Interaction {
                user: urow[&r.user_id],
                item: irow[&r.item_id],
                rating: r.rating,
                timestamp: r.timestamp,
                label: r.label,
                split: r.split.unwrap_or(Split::Train),
                cold: r.cold,
            })
            .collect();
        let mut ds = Self {
            user_ids,
            items,
            interactions,
            history: Vec::new(),
            history_pos: Vec::new(),
            split_assigned: false,
        };
        ds.reindex();
        Ok(ds)
    }

    fn reindex(&mut self) {
        self.history = vec![Vec::new(); self.user_ids.len()];
        self.history_pos = Vec::with_capacity(self.interactions.len());
        for (k, it) in self.interactions.iter().enumerate() {
            self.history_pos.push(self.history[it.user].len());
            self.history[it.user].push(k);
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn title(&self, item: usize) -> &str {
        &self.items[item].title
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.interactions
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == split)
            .map(|(k, _)| k)
            .collect()
    }

    /// The user's interactions strictly before interaction `k` in their
    /// chronological history, most recent `limit` only, oldest first.
    pub fn history_before(&self, k: usize, limit: usize) -> &[usize] {
        let it = &self.interactions[k];
        let pos = self.history_pos[k];
        let hist = &self.history[it.user][..pos];
        &hist[hist.len().saturating_sub(limit)..]
    }

    /// Items that occur in the train split.
    pub fn train_items(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n_items()];
        for it in self.interactions.iter().filter(|it| it.split == Split::Train) {
            seen[it.item] = true;
        }
        seen
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut splits = BTreeMap::new();
        for s in [Split::Train, Split::Valid, Split::Test] {
            let rows: Vec<&Interaction> = self.interactions.iter().filter(|it| it.split == s).collect();
            let cold_items: BTreeSet<usize> = rows.iter().filter(|it| it.cold).map(|it| it.item).collect();
            splits.insert(
                s.as_str().to_string(),
                SplitCounts {
                    interactions: rows.len(),
                    positives: rows.iter().filter(|it| it.label == 1).count(),
                    cold_interactions: rows.iter().filter(|it| it.cold).count(),
                    cold_items: cold_items.len(),
                    users: rows.iter().map(|it| it.user).collect::<BTreeSet<_>>().len(),
                },
            );
        }
        DatasetManifest {
            users: self.n_users(),
            items: self.n_items(),
            interactions: self.len(),
            positives: self.interactions.iter().filter(|it| it.label == 1).count(),
            split_assigned: self.split_assigned,
            splits,
            data_hash: self.content_hash(),
        }
    }

    fn interactions_tsv(&self) -> String {
        let mut s = String::from("user_id\titem_id\trating\ttimestamp\tlabel\tsplit\tcold\n");
        for it in &self.interactions {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.user_ids[it.user],
                self.items[it.item].id,
                it.rating,
                it.timestamp,
                it.label,
                it.split.as_str(),
                it.cold as u8
            );
        }
        s
    }

    fn items_tsv(&self) -> String {
        let mut s = String::from("item_id\ttitle\n");
        for item in &self.items {
            let title = item.title.replace(['\t', '\n', '\r'], " ");
            let _ = writeln!(s, "{}\t{}", item.id, title);
        }
        s
    }

    /// SHA-256 over the canonical TSV serialization.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.interactions_tsv().as_bytes());
        h.update(self.items_tsv().as_bytes());
        hex_string(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("interactions.tsv", self.interactions_tsv())?;
        write("items.tsv", self.items_tsv())?;
        write("manifest.json", serde_json::to_string_pretty(&self.manifest())? + "\n")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let items_path = dir.join("items.tsv");
        let mut titles = HashMap::new();
        for (n, line) in read("items.tsv")?.lines().enumerate().skip(1) {
            let (id, title) = line.split_once('\t').unwrap_or((line, ""));
            let id = id.parse::<i64>().map_err(|e| Error::Parse {
                path: items_path.clone(),
                line: n + 1,
                msg: format!("bad item id: {e}"),
            })?;
            titles.insert(id, title.to_string());
        }
        let path = dir.join("interactions.tsv");
        let mut records = Vec::new();
        let mut any_split = false;
        for (n, line) in read("interactions.tsv")?.lines().enumerate().skip(1) {
            let bad = |msg: String| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<i64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let split = Split::parse(f[5]).ok_or_else(|| bad(format!("unknown split {:?}", f[5])))?;
            any_split |= split != Split::Train;
            let item_id = num(f[1])?;
            if !titles.contains_key(&item_id) {
                return Err(bad(format!("item {item_id} missing from items.tsv")));
            }
            records.push(RawRecord {
                user_id: num(f[0])?,
                item_id,
                rating: num(f[2])? as u8,
                timestamp: num(f[3])?,
                label: num(f[4])? as u8,
                split: Some(split),
                cold: f[6] == "1",
            });
        }
        let mut ds = Self::from_records(records, &titles)?;
        let manifest: DatasetManifest = serde_json::from_str(&read("manifest.json")?)?;
        ds.split_assigned = manifest.split_assigned || any_split;
        Ok(ds)
    }
}

/// Parsed input row before dense indexing.
#[derive(Clone, Debug)]
pub struct RawRecord {
    pub user_id: i64,
    pub item_id: i64,
    pub rating: u8,
    pub timestamp: i64,
    pub label: u8,
    pub split: Option<Split>,
    pub cold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub interactions: usize,
    pub positives: usize,
    pub cold_interactions: usize,
    pub cold_items: usize,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub positives: usize,
    pub split_assigned: bool,
    pub splits: BTreeMap<String, SplitCounts>,
    pub data_hash: String,
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: i64, i: i64, t: i64, label: u8) -> RawRecord {
        RawRecord {
            user_id: u,
            item_id: i,
            rating: if label == 1 { 5 } else { 1 },
            timestamp: t,
            label,
            split: None,
            cold: false,
        }
    }

    #[test]
    fn history_is_chronological_per_user() {
        let titles = HashMap::from([(10, "a".to_string()), (20, "b".to_string()), (30, "c".to_string())]);
        let ds = InteractionDataset::from_records(
            vec![rec(1, 10, 5, 1), rec(2, 20, 1, 0), rec(1, 30, 2, 0), rec(1, 20, 9, 1)],
            &titles,
        )
        .unwrap();
        let u1 = &ds.history[0];
        let ts: Vec<i64> = u1.iter().map(|&k| ds.interactions[k].timestamp).collect();
        assert_eq!(ts, vec![2, 5, 9]);
        let last = *u1.last().unwrap();
        assert_eq!(ds.history_before(last, 10), &u1[..2]);
        assert_eq!(ds.history_before(last, 1), &u1[1..2]);
        assert!(ds.history_before(u1[0], 10).is_empty());
    }

    #[test]
    fn save_load_roundtrip_preserves_hash() {
        let titles = HashMap::from([(10, "x y".to_string()), (20, "z".to_string())]);
        let mut ds =
            InteractionDataset::from_records(vec![rec(1, 10, 1, 1), rec(2, 20, 2, 0), rec(1, 20, 3, 1), rec(2, 10, 4, 0)], &titles)
                .unwrap();
        temporal_split(&mut ds, [2.0, 1.0, 1.0]).unwrap();
        tag_warm_cold(&mut ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = InteractionDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
    }
}
