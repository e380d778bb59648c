//! Autoregressive pretraining of selective state-space vision models.

pub mod arch;
pub mod config;
pub mod data;
pub mod error;
pub mod layout;
pub mod objective;
pub mod params;
pub mod scan;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore, Scope};
pub use tensor::{Element, Tape, Tensor, Var};
