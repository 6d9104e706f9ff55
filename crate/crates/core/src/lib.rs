//! Prompt-conditioned generation of LoRA adapters.
//!
//! The pipeline: synthetic tasks ([`corpus`]) → per-task LoRA checkpoint zoos on
//! a frozen tiny transformer ([`zoo`]) → lossless weight tokenization
//! ([`codec`]) → frozen prompt encoding ([`encoder`]) → a cascaded
//! hyper-convolutional decoder ([`decoder`]) trained with tokenized MSE
//! ([`trainer`]) → zero-shot evaluation ([`eval`]).

pub mod binio;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod optim;
pub mod seed;
pub mod trainer;
pub mod weightmap;
pub mod zoo;

pub use error::{Error, Result};
