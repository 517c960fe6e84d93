//! Gated CTR models trained from scratch.
//!
//! Embedding-gate and hidden-gate layers on top of FM, DNN and DeepFM, with
//! hand-paired backward passes checked against finite differences, a
//! delimited-text data pipeline, Adam, and AUC/logloss evaluation.
//!
//! ```
//! use gatectr::prelude::*;
//!
//! let mut spec = ModelSpec::new(Family::Dnn, &[10, 10, 10]);
//! spec.embed_gate = Some(GateConfig::default());
//! let model = Model::new(spec, 7).unwrap();
//! let p = model.predict(&[1, 4, 9]).unwrap();
//! assert!(p > 0.0 && p < 1.0);
//! ```

pub mod checkpoint;
pub mod data;
pub mod gates;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub mod prelude {
    pub use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError};
    pub use crate::data::{
        batches, build_vocab, encode_instance, encode_rows, read_rows, split, split_indices, synthesize_planted, Dataset,
        EncodedBatch, EncodedInstance, Field, FieldKind, FieldSchema, PlantedConfig, RawRow, Vocabulary,
    };
    pub use crate::gates::{GateConfig, Granularity, Sharing};
    pub use crate::metrics::{auc, auc_bruteforce, logloss, EvalResult};
    pub use crate::model::{cross_entropy, predict, Family, HiddenGateConfig, Model, ModelSpec, Parameterized};
    pub use crate::params::ParamStore;
    pub use crate::tensor::{Activation, InitScheme, Rng, Tensor};
    pub use crate::train::{adam_step, evaluate, train, AdamConfig, AdamState, Splits, TrainConfig, TrainReport};
}
