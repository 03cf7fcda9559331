//! Small convolutional network stack with explicit backward passes.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod optim;
pub mod real;

pub use layers::Fmap;
pub use network::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, fmap_from_image,
    head_backward, head_forward, Arch, DecoderTrace, EncoderTrace, Head, Param, Params,
};
pub use optim::{ema_update, Adam, AdamConfig, StepDecay};
pub use real::Real;
