//! Dataset ingestion and synthesis: IDX binary parsing, synthetic
//! Gaussian-mixture classification generators, context-label assignment
//! (superclass maps, domain tags, mixture-derived clusters), and batching.

pub mod dataset;
pub mod idx;
pub mod synth;

pub use dataset::{
    assign_contexts, assign_contexts_by_features, batch_iter, spatial_mean_rows, ContextStrategy,
    DataBatch, LabeledDataset, SuperclassMap,
};
pub use idx::{parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{
    synth_cell_means, synth_domain_dataset, synth_mixture_dataset, DomainSpec, SynthSpec,
};
