use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};

use super::metrics::{auc, group_by_user, uauc};

/// Metrics on one slice of the evaluated interactions. Metrics that are
/// undefined on the slice (single class, no eligible user) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub eligible_users: usize,
    pub excluded_users: usize,
}

impl SliceMetrics {
    fn compute(rows: &[(usize, f64, u8)]) -> Self {
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let groups = group_by_user(rows.iter().copied());
        let u = uauc(&groups).ok();
        let eligible = groups
            .iter()
            .filter(|(_, l)| l.contains(&0) && l.contains(&1))
            .count();
        Self {
            count: rows.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
            auc: auc(&scores, &labels).ok(),
            uauc: u.map(|r| r.value),
            eligible_users: eligible,
            excluded_users: groups.len() - eligible,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub all: SliceMetrics,
    pub warm: SliceMetrics,
    pub cold: SliceMetrics,
}

/// Overall, warm-only and cold-only metrics for `(interaction, score)`
/// pairs. Warm and cold partition the rows by the interaction's cold flag.
pub fn warm_cold_report(
    dataset: &str,
    variant: &str,
    ds: &InteractionDataset,
    scored: &[(usize, f64)],
) -> Result<MetricsReport> {
    if !ds.split_assigned {
        return Err(Error::contract("warm_cold_report", "dataset has no split or cold flags"));
    }
    let mut all = Vec::with_capacity(scored.len());
    let (mut warm, mut cold) = (Vec::new(), Vec::new());
    for &(k, s) in scored {
        let it = ds.interactions.get(k).ok_or(Error::Lookup {
            op: "warm_cold_report",
            index: k,
            len: ds.len(),
        })?;
        let row = (it.user, s, it.label);
        all.push(row);
        if it.cold {
            cold.push(row);
        } else {
            warm.push(row);
        }
    }
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        variant: variant.to_string(),
        all: SliceMetrics::compute(&all),
        warm: SliceMetrics::compute(&warm),
        cold: SliceMetrics::compute(&cold),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Aligned text table, one row per report: AUC and UAUC on all, warm and
/// cold interactions, then slice sizes.
pub fn text_table(reports: &[MetricsReport]) -> String {
    let header = [
        "dataset", "variant", "AUC", "UAUC", "warm AUC", "warm UAUC", "cold AUC", "cold UAUC", "n", "warm", "cold",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.variant.clone(),
                cell(r.all.auc),
                cell(r.all.uauc),
                cell(r.warm.auc),
                cell(r.warm.uauc),
                cell(r.cold.auc),
                cell(r.cold.uauc),
                r.all.count.to_string(),
                r.warm.count.to_string(),
                r.cold.count.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Split, SynthConfig};

    #[test]
    fn slices_partition_rows() {
        let ds = synth_generate(&SynthConfig::default()).unwrap();
        let scored: Vec<(usize, f64)> = ds
            .indices(Split::Test)
            .into_iter()
            .map(|k| (k, ds.interactions[k].label as f64 + (k % 7) as f64 * 0.1))
            .collect();
        let r = warm_cold_report("synth", "oracle", &ds, &scored).unwrap();
        assert_eq!(r.warm.count + r.cold.count, r.all.count);
        assert!(r.cold.count > 0);
        assert!(r.all.auc.unwrap() > 0.5);
        let t = text_table(&[r]);
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("dataset  variant"));
    }

    #[test]
    fn no_cold_items_gives_empty_slice() {
        let mut ds = synth_generate(&SynthConfig {
            cold_fraction: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        ds.interactions.iter_mut().for_each(|it| it.cold = false);
        let scored: Vec<(usize, f64)> = ds.indices(Split::Test).into_iter().map(|k| (k, 0.5)).collect();
        let r = warm_cold_report("synth", "flat", &ds, &scored).unwrap();
        assert_eq!(r.cold.count, 0);
        assert_eq!(r.cold.auc, None);
        assert_eq!(r.all.auc, Some(0.5));
        assert!(text_table(&[r]).contains("n/a"));
    }
}
