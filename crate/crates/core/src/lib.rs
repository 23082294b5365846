//! Uploadable multi-source few-shot domain adaptation with vision-aware
//! multimodal prompts on a small frozen dual encoder.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod integration;
pub mod losses;
pub mod pipeline;
pub mod prompt;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod warmup;

pub use error::{Error, Result};
