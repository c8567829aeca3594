use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InteractionDataset, RawRecord};
use crate::error::{Error, Result};

/// Inclusive-start, exclusive-end timestamp filter; open on a missing side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Option<i64>,
    pub end: Option<i64>,
}

impl TimeWindow {
    pub fn contains(&self, t: i64) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t < e)
    }
}

impl FromStr for TimeWindow {
    type Err = Error;

    /// `START..END`, either side may be empty (`..END`, `START..`, `..`).
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("time window {s:?} is not START..END")))?;
        let side = |v: &str| -> Result<Option<i64>> {
            if v.trim().is_empty() {
                Ok(None)
            } else {
                v.trim()
                    .parse()
                    .map(Some)
                    .map_err(|e| Error::Config(format!("time window bound {v:?}: {e}")))
            }
        };
        Ok(TimeWindow {
            start: side(a)?,
            end: side(b)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Ratings strictly above this value are positive.
    pub threshold: u8,
    /// Users need strictly more than this many interactions (after the
    /// window filter) to be kept.
    pub min_user_interactions: usize,
    pub window: TimeWindow,
}

/// `label = 1` iff `rating > threshold`.
pub fn binarize(rating: u8, threshold: u8) -> u8 {
    (rating > threshold) as u8
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains("::") {
        line.split("::").collect()
    } else {
        line.split('\t').collect()
    }
}

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Reads `item<sep>title[<sep>...]` rows; extra fields (genres) are ignored.
fn read_items(path: &Path) -> Result<HashMap<i64, String>> {
    let mut titles = HashMap::new();
    for (n, line) in read_lossy(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(line);
        let bad = |msg: String| Error::Parse {
            path: PathBuf::from(path),
            line: n + 1,
            msg,
        };
        if f.len() < 2 {
            return Err(bad("expected item and title fields".into()));
        }
        let id = f[0].trim().parse::<i64>().map_err(|e| bad(format!("item id {:?}: {e}", f[0])))?;
        titles.insert(id, f[1].trim().to_string());
    }
    Ok(titles)
}

/// Ingests `user<sep>item<sep>rating<sep>timestamp` rows (`::` or tab
/// separated), binarizes ratings, applies the time window and the user
/// activity floor. Splits are not assigned yet.
pub fn ingest(ratings: &Path, items: &Path, cfg: &IngestConfig) -> Result<InteractionDataset> {
    let titles = read_items(items)?;
    let mut records = Vec::new();
    for (n, line) in read_lossy(ratings)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: PathBuf::from(ratings),
            line: n + 1,
            msg,
        };
        let f = split_fields(line);
        if f.len() < 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        let int = |s: &str| s.trim().parse::<i64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let (user_id, item_id, rating, timestamp) = (int(f[0])?, int(f[1])?, int(f[2])?, int(f[3])?);
        if !(1..=5).contains(&rating) {
            return Err(bad(format!("rating {rating} outside 1..=5")));
        }
        if !titles.contains_key(&item_id) {
            return Err(bad(format!("item {item_id} not in items file")));
        }
        if !cfg.window.contains(timestamp) {
            continue;
        }
        let rating = rating as u8;
        records.push(RawRecord {
            user_id,
            item_id,
            rating,
            timestamp,
            label: binarize(rating, cfg.threshold),
            split: None,
            cold: false,
        });
    }
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for r in &records {
        *counts.entry(r.user_id).or_default() += 1;
    }
    records.retain(|r| counts[&r.user_id] > cfg.min_user_interactions);
    if records.is_empty() {
        return Err(Error::EmptyDataset { stage: "ingest" });
    }
    InteractionDataset::from_records(records, &titles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_threshold() {
        assert_eq!(binarize(4, 3), 1);
        assert_eq!(binarize(3, 3), 0);
        assert_eq!(binarize(5, 4), 1);
        assert_eq!(binarize(4, 4), 0);
    }

    #[test]
    fn window_parsing() {
        let w: TimeWindow = "10..20".parse().unwrap();
        assert!(w.contains(10) && w.contains(19) && !w.contains(20) && !w.contains(9));
        let open: TimeWindow = "..".parse().unwrap();
        assert!(open.contains(i64::MIN));
        assert!("10-20".parse::<TimeWindow>().is_err());
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn movielens_format_with_filters() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "movies.dat", "1::Toy Story (1995)::Animation\n2::Heat (1995)::Action\n");
        let ratings = write(
            dir.path(),
            "ratings.dat",
            "1::1::5::100\n1::2::3::200\n1::2::4::999\n2::1::4::150\n",
        );
        let cfg = IngestConfig {
            threshold: 3,
            min_user_interactions: 1,
            window: "..500".parse().unwrap(),
        };
        let ds = ingest(&ratings, &items, &cfg).unwrap();
        // user 2 has one interaction in window and is dropped; 999 is outside.
        assert_eq!(ds.user_ids, vec![1]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.interactions[0].label, 1);
        assert_eq!(ds.interactions[1].label, 0);
        assert_eq!(ds.title(0), "Toy Story (1995)");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.tsv", "1\tA\n");
        let ratings = write(dir.path(), "r.tsv", "1\t1\t5\t1\n1\t1\tfive\t2\n");
        let cfg = IngestConfig {
            threshold: 3,
            min_user_interactions: 0,
            window: TimeWindow::default(),
        };
        match ingest(&ratings, &items, &cfg).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_result_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.tsv", "1\tA\n");
        let ratings = write(dir.path(), "r.tsv", "1\t1\t5\t1\n");
        let cfg = IngestConfig {
            threshold: 3,
            min_user_interactions: 20,
            window: TimeWindow::default(),
        };
        assert!(matches!(ingest(&ratings, &items, &cfg), Err(Error::EmptyDataset { .. })));
    }
}
