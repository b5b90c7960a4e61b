//! Multi-resolution convolutional part detector.

mod config;
mod net;

pub use config::{Layer, ModelParams, NetworkConfig};
pub use net::{
    backward, backward_patchwise, forward_oneshot, forward_patchwise, forward_with_tape, GridMeta,
    ResponseMaps, Tape,
};
