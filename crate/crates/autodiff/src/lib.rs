//! Dense `f64` arrays and a tape-based reverse-mode differentiation engine,
//! sized for the small convolutional and attention networks used by the
//! diffusion acoustic model.

mod adam;
mod array;
mod error;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use error::AutodiffError;
pub use params::{uniform_init, Gradients, ParamStore};
pub use tape::{sigmoid, softplus, Node, Tape, Var};
