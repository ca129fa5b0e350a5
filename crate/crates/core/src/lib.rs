//! Parameter-efficient fine-tuning laboratory: a small reverse-mode autodiff
//! engine, a Swin-style host network, the Mona adapter with its baseline
//! family, and a deterministic training harness.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod delta;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod verify;

pub use autograd::{Tape, Var};
pub use backbone::{build_backbone, BackboneConfig, ModuleGraph};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use params::{Origin, Parameter};
pub use tensor::Tensor;
