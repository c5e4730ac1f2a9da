//! Datasets, non-IID partitioning and per-client data views.

mod dataset;
pub mod idx;
mod partition;

pub use dataset::{
    draw_meta_set, exponential_imbalance, gen_synthetic, ClientData, Dataset, Provenance,
    SyntheticSpec,
};
pub(crate) use dataset::normalize_counts;
pub use idx::load_idx;
pub use partition::{
    dirichlet_partition, dirichlet_partition_pool, largest_remainder, sample_dirichlet, Partition,
    PartitionReport,
};
