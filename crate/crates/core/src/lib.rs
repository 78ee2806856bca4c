pub mod attacks;
pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod tensor;

pub use autodiff::{ActivationKind, ActivationSpec, SecondOrderMode, Tape, Var};
pub use error::{FarError, Result};
pub use tensor::Tensor;
