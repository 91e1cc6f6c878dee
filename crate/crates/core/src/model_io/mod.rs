//! Configuration, weights, the tensor archive and the fixture vocabulary.

pub mod archive;
pub mod config;
pub mod vocab;
pub mod weights;

pub use archive::{Archive, ArchiveWriter, Manifest, TensorEntry};
pub use config::{Activation, MlpKind, ModelConfig};
pub use vocab::{Vocab, BOS_ID};
pub use weights::{
    generate_random_model, load_weights, read_config, save_weights, weights_from_archive, weights_to_archive,
    LayerWeights, MlpWeights, WeightSet,
};
