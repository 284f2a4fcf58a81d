//! Metrics, bootstrap intervals, frequency buckets, error attribution and ablations.

pub mod ablation;
pub mod attribution;
pub mod bootstrap;
pub mod buckets;
pub mod metrics;

pub use ablation::{run_ablation, AblationRow};
pub use attribution::{attribute_errors, ErrorAttribution, Stage};
pub use bootstrap::{bootstrap_ci, BootstrapCI, BootstrapConfig};
pub use buckets::{bucket_bounds, bucket_f1, buckets_csv, RelationBucket};
pub use metrics::{
    f_beta, macro_metrics, micro_metrics, DocTriples, MacroScope, MetricReport, TripleSet,
};
