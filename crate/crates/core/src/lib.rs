//! Action-knowledge patching for frozen video-language encoders, on a synthetic world.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fuser;
pub mod gradsuite;
pub mod harness;
pub mod objectives;
pub mod patcher;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
