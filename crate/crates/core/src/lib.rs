//! BYOL self-supervised pretraining followed by pseudo-label self-training,
//! built on a small tape-based reverse-mode autodiff engine over `f64`
//! tensors.

pub mod augment;
pub mod autodiff;
pub mod byol;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use augment::{augment, make_view_pair, AugmentationConfig};
pub use autodiff::{Gradients, Graph, Var};
pub use byol::{pretrain, pretrain_step, LossTrace, PretrainConfig, Pretrained};
pub use config::ExperimentConfig;
pub use data::{synth_generate, DatasetBundle, LabeledSet, SynthConfig};
pub use error::{Error, FormatError, Result};
pub use grid::{GridCell, GridSpec};
pub use io::Checkpoint;
pub use model::{Component, HeadInput, NetworkSpec, ParamSet, TrainState};
pub use pipeline::{EvalReport, FinetuneConfig, PseudoExample};
pub use rng::Rng;
pub use tensor::Tensor;
