//! Contextualized diffusion on low-dimensional conditional data.
//!
//! A learned relational function r_φ(x₀, c, t), scaled by the gain
//! k_t = √ᾱ_t(1 − √ᾱ_t), biases every kernel mean of a DDPM forward process.
//! The reverse process plugs a predicted x̂₀ into the adapted posterior, and
//! the DDIM generalization keeps the same marginals.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod gaussian;
pub mod nn;
pub mod noise;
pub mod reverse;
pub mod schedule;
pub mod toy_oracle;
pub mod training;
pub mod verify;

pub use adapter::{AdapterSpec, Condition, ContextAdapter, LearnedAdapterSpec, OutputInit};
pub use denoiser::{Denoiser, DenoiserSpec, KnownX0, X0Predictor};
pub use error::{Error, Result};
pub use forward::{Fault, ForwardProcess, NoisySample};
pub use gaussian::GaussianParams;
pub use noise::{NoiseSource, ZeroNoise};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use reverse::{ReverseProcess, SampleSet, SamplerConfig, SamplerMode};
pub use data::{DatasetSpec, Generator, ToyDataset};
pub use toy_oracle::ToyModel;
pub use training::{LambdaMode, LrSchedule, Model, NelboOptions, NelboReport, TrainConfig, TrainState};
pub use verify::{run_suite, CheckReport, SuiteOptions, SuiteReport};
