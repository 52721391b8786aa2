//! Minimal differentiable toolkit: tape-based reverse mode over batched
//! matrices, dense/embedding layers, AdamW, finite-difference checks and
//! flat checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{Checkpoint, CheckpointHeader, MAGIC};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{forward_mlp, timestep_features, Activation, Dense, Embedding, Mlp};
pub use optim::{AdamState, AdamWConfig};
pub use params::{BoundParams, NamedTensor, ParamGrads, ParamSet};
pub use tape::{Gradients, Mat, Tape, Var};
