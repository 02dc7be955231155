//! Dynamic MRI reconstruction with neural field expansions: tensor products of
//! univariate sine networks fitted to undersampled multi-coil k-space.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod error;
pub mod fft;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod nfe;
pub mod optimize;
pub mod quadrature;
pub mod regularize;
pub mod sampler;
pub mod siren;
pub mod synth;
pub mod tensor;
