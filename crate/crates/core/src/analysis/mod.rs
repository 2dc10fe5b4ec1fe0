//! Evaluation metrics and feature-redundancy measures on representation
//! matrices (rows are samples, columns are feature dimensions).

mod metrics;
mod redundancy;

pub use metrics::{classification_metrics, error_metrics};
pub use redundancy::{
    average_ranks, column_pairs, mutual_information, mutual_information_pair, pca_proportion,
    pearson, pearson_abs, redundancy_report, spearman_abs, PairSpec, RedundancyReport,
    RedundancySettings,
};
