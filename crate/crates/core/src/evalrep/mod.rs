//! Ranking metrics, warm/cold reports, and alignment / attention exports.

mod export;
mod metrics;
mod report;

pub use export::{
    attention_csv, attention_maps, cosine_report, embedding_csv, embedding_export, CosineReport, COSINE_BINS,
};
pub use metrics::{auc, group_by_user, uauc, UaucResult};
pub use report::{text_table, warm_cold_report, MetricsReport, SliceMetrics};
