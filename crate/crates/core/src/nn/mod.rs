//! The velocity network: layers, UNet assembly, AdamW and checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod embed;
pub mod layers;
pub mod params;
pub mod unet;

pub use adamw::{AdamWConfig, AdamWState};
pub use embed::time_embedding;
pub use layers::{Activation, FeatureMap};
pub use params::{Grads, ParamId, ParamStore};
pub use unet::{NetworkConfig, Tape, UNet, VelocityFieldModel};
