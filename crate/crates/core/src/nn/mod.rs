//! Minimal neural-network toolkit over candle tensors: convolution, layers,
//! parameter storage, the Adam optimizer and checkpoints.

mod adam;
mod checkpoint;
mod conv;
mod filter;
pub mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, TrainState};
pub use conv::{conv2d, ConvGeom};
pub use filter::{Axis, AxisFilter};
pub use params::{Conv2d, Linear, ParamStore};
