//! Linear probes on hidden states and subspace projectors.

pub mod probe;
pub mod projection;

pub use probe::{
    accuracy, default_min_layer, flag_tokens, mean_untruthful_probability, probe_predict, train_probe, LinearProbe,
    ProbeHyperParams, ProbeSet, TrainingSummary,
};
pub use projection::{pivoted_qr_basis, projection_from_directions, split_subspace, ProjectionMatrix};
