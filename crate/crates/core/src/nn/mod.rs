//! A small reverse-mode autodiff engine and the layers built on it.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use tape::{Grads, ParamId, ParamStore, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
}
