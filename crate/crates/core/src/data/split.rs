use super::{InteractionDataset, Split};
use crate::error::{Error, Result};

/// Global chronological split: the earliest fraction of interactions goes to
/// train, then valid, then test. Ratios are normalized internally.
pub fn temporal_split(ds: &mut InteractionDataset, ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset { stage: "temporal_split" });
    }
    let total: f64 = ratios.iter().sum();
    let n = ds.len();
    let train_end = ((n as f64) * ratios[0] / total).round() as usize;
    let valid_end = (((n as f64) * (ratios[0] + ratios[1]) / total).round() as usize).max(train_end);
    let (train, valid, test) = (train_end, valid_end - train_end, n - valid_end);
    if train == 0 || valid == 0 || test == 0 {
        return Err(Error::EmptyPartition { train, valid, test });
    }
    for (k, it) in ds.interactions.iter_mut().enumerate() {
        it.split = if k < train_end {
            Split::Train
        } else if k < valid_end {
            Split::Valid
        } else {
            Split::Test
        };
        it.cold = false;
    }
    ds.split_assigned = true;
    Ok(())
}

/// Marks valid/test interactions whose item never occurs in train as cold.
pub fn tag_warm_cold(ds: &mut InteractionDataset) -> Result<()> {
    if !ds.split_assigned {
        return Err(Error::Config("tag_warm_cold needs split assignments".into()));
    }
    let seen = ds.train_items();
    for it in &mut ds.interactions {
        it.cold = it.split != Split::Train && !seen[it.item];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::data::RawRecord;

    fn dataset(items: &[i64]) -> InteractionDataset {
        let titles: HashMap<i64, String> = items.iter().map(|&i| (i, format!("t{i}"))).collect();
        let records = items
            .iter()
            .enumerate()
            .map(|(t, &i)| RawRecord {
                user_id: 1,
                item_id: i,
                rating: 4,
                timestamp: t as i64,
                label: 1,
                split: None,
                cold: false,
            })
            .collect();
        InteractionDataset::from_records(records, &titles).unwrap()
    }

    #[test]
    fn four_interactions_two_one_one() {
        let mut ds = dataset(&[1, 2, 3, 4]);
        temporal_split(&mut ds, [2.0, 1.0, 1.0]).unwrap();
        let s: Vec<Split> = ds.interactions.iter().map(|i| i.split).collect();
        assert_eq!(s, vec![Split::Train, Split::Train, Split::Valid, Split::Test]);
    }

    #[test]
    fn empty_partition_lists_sizes() {
        let mut ds = dataset(&[1, 2, 3]);
        let err = temporal_split(&mut ds, [11.0, 0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::EmptyPartition { train: 3, valid: 0, test: 0 }), "{err}");
    }

    #[test]
    fn cold_iff_unseen_in_train() {
        let mut ds = dataset(&[1, 2, 1, 3]);
        temporal_split(&mut ds, [2.0, 1.0, 1.0]).unwrap();
        tag_warm_cold(&mut ds).unwrap();
        let cold: Vec<bool> = ds.interactions.iter().map(|i| i.cold).collect();
        assert_eq!(cold, vec![false, false, false, true]);
    }

    #[test]
    fn tagging_requires_split() {
        let mut ds = dataset(&[1, 2]);
        assert!(tag_warm_cold(&mut ds).is_err());
    }
}
