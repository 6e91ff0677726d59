//! Spectral band decomposition and geodesic prototype matching for
//! few-shot segmentation on synthetic phantoms, with a self-contained
//! tape autograd and finite-difference gradient checking.

pub mod autograd;
pub mod error;
pub mod fft;
pub mod gm;
pub mod episodes;
pub mod io;
pub mod losses;
pub mod oracle;
pub mod props;
pub mod spb;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
