//! Adversarial-robustness lab for a small MNIST CNN.
//!
//! The crate trains the classifier with a hand-written reverse-mode engine,
//! attacks it with FGSM and a universal adversarial patch, and defends it with
//! defensive distillation. Everything runs in `f64` on the CPU and is
//! reproducible from a seed.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod seed;
pub mod tensor;
pub mod training;

pub use autodiff::{Mode, Tape, Var};
pub use dataset::LabeledDataset;
pub use error::{Error, Result};
pub use network::{Network, Targets};
pub use tensor::Tensor;
