//! Text-conditioned image diffusion with a shifted-window transformer U-Net.

pub mod config;
pub mod datapipe;
pub mod diffusion;
mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod run;
pub mod schedule;
pub mod shapes;
pub mod swin;
pub mod textcond;
pub mod train;
pub mod unet;

pub use config::{ModelConfig, StageLayout};
pub use error::{Error, Result};
pub use tecswin_tensor as tensor;
pub use unet::TecSwinModel;
