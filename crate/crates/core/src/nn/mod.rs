//! Minimal neural-network machinery: autodiff tape, parameters, optimizer,
//! the transformer encoder and checkpoint files.

pub mod checkpoint;
pub mod encoder;
pub mod params;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use encoder::{
    BoundEncoder, Encoder, EncoderConfig, PooledEmbedding, SequenceEncoder, TokenEmbeddings,
};
pub use params::{Adam, AdamConfig, Gradients, ParamId, ParamSet};
pub use tape::{bce_with_logits, sigmoid, Tape, Var};
