//! Detail-enhancing reference-based super-resolution.

pub mod autograd;
pub mod config;
pub mod correspond;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod instrument;
pub mod io;
pub mod linop;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tiling;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use image::{bicubic_resize, to_y_channel, Image};
pub use io::{load_image, save_image};
pub use linop::{Decomposition, LinearOperator, OperatorKind, PadPolicy};
pub use rng::Rng;
