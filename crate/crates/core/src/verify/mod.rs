//! Property suites behind `stb-asv verify`.

mod kernels;
mod model;
mod suites;

pub use kernels::{kernel_gradcheck, KINK_MARGIN};
pub use model::model_gradcheck;
pub use suites::*;
