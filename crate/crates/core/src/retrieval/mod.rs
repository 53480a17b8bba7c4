//! Gallery storage, ranking metrics and the cross-model evaluation settings.

pub mod gallery;
pub mod metrics;
pub mod notations;
pub mod refresh;
pub mod store;

pub use gallery::Gallery;
pub use metrics::{average_precision_at_k, mean_average_precision, rank, MapResult};
pub use notations::{evaluate_notations, MetricReport, Notations};
pub use refresh::{hot_refresh, validate_fractions, RefreshPoint};
pub use store::EmbeddingStore;
