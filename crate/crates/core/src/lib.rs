//! Single-channel speech separation toolkit: conformer mask estimation,
//! feature-level and recognizer-driven objectives with permutation-invariant
//! training, layer-wise teacher-student compression, and chunk-wise
//! continuous separation.

pub mod error;
pub mod eval;
pub mod asr;
pub mod css;
pub mod dsp;
pub mod losses;
pub mod selftest;
pub mod separator;
pub mod simulate;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tensor, ParamStore};
