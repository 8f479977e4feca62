//! Sequence-model building blocks assembled from graph ops.

mod attention;
mod blocks;
mod dropout;
mod linear;
mod lstm;
mod position;
mod rnn;

pub use attention::{scaled_dot_attention, AttentionConfig, MultiHeadAttention};
pub use blocks::{DecoderBlock, EncoderBlock};
pub use dropout::ForwardCtx;
pub use linear::{add_norm, FeedForward, LayerNormParams, Linear, Mlp};
pub use lstm::{Lstm, LstmOutput, LstmParams, LstmStack};
pub use position::{positional_encoding, positional_encoding_at, PeBase};
pub use rnn::{RecurrentStack, Rnn};
