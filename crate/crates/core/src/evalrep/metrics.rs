use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half. Rank-sum method,
/// `O(n log n)`.
pub fn auc<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes (positives={pos}, negatives={neg})"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("auc", "NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UaucResult {
    pub value: f64,
    /// Users with at least one positive and one negative.
    pub eligible_users: usize,
    /// Single-class users left out of the average.
    pub excluded_users: usize,
}

/// Mean per-user AUC over users that have both classes.
pub fn uauc<S: Scalar>(per_user: &[(Vec<S>, Vec<u8>)]) -> Result<UaucResult> {
    let mut total = 0.0;
    let mut eligible = 0;
    for (scores, labels) in per_user {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == labels.len() {
            continue;
        }
        total += auc(scores, labels)?;
        eligible += 1;
    }
    if eligible == 0 {
        return Err(Error::UndefinedMetric("uauc: no user has both classes".into()));
    }
    Ok(UaucResult {
        value: total / eligible as f64,
        eligible_users: eligible,
        excluded_users: per_user.len() - eligible,
    })
}

/// Groups `(user, score, label)` triples by user, preserving first-seen
/// user order.
pub fn group_by_user<S: Scalar>(rows: impl IntoIterator<Item = (usize, S, u8)>) -> Vec<(Vec<S>, Vec<u8>)> {
    let mut slot = std::collections::HashMap::new();
    let mut groups: Vec<(Vec<S>, Vec<u8>)> = Vec::new();
    for (u, s, l) in rows {
        let k = *slot.entry(u).or_insert_with(|| {
            groups.push((Vec::new(), Vec::new()));
            groups.len() - 1
        });
        groups[k].0.push(s);
        groups[k].1.push(l);
    }
    groups
}
