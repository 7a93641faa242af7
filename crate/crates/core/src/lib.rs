//! Personality-conditioned mixture of LoRA experts on a small decoder-only
//! transformer, with the data, training and assessment tooling around it.

pub mod assessment;
pub mod autodiff;
pub mod chat;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod persona;
pub mod routing;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use persona::{Dimension, Level, TraitId};
pub use tensor::Tensor;
