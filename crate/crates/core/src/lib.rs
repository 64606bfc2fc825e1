//! Frame-level multi-channel speaker verification for ad-hoc microphone arrays.
//!
//! The crate bundles everything the toolkit needs:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape
//!   with the kernel set the model uses, each checked against finite differences.
//! - [`attention`]: multi-head self-attention over a chosen axis with residual
//!   raw-score pass-through, pre-norm sublayers and the position-wise FFN.
//! - [`model`]: the spatio-temporal block stack (cross-frame then cross-channel
//!   attention), channel fusion, self-attentive pooling and classifier head.
//! - [`sim`]: a feature-space ad-hoc array simulator and dataset writer.
//! - [`train`] and [`eval`]: two-stage training, cosine scoring and EER.
//! - [`pipeline`]: the staged recipe behind the `stb-asv` command line.
//! - [`verify`]: the property suites run by `stb-asv verify`.

pub mod attention;
pub mod autodiff;
pub mod config;
mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attention::{Normalizer, ScoreSharing, ScoreState};
pub use autodiff::{Gradients, Kernel, Tape, Var};
pub use error::{Error, Result};
pub use model::{StbConfig, StbModel};
pub use tensor::Tensor;
