//! Transformer gloss encoder, recursive pose decoder and pose fitting loss.

mod checkpoint;
mod loss;
mod model;
mod params;
mod vocab;

pub(crate) use checkpoint::Reader;
pub use checkpoint::Checkpoint;
pub use loss::{loss_acc, loss_acc_graph};
pub use model::{
    decode, decode_autoregressive, decode_graph, embed_gloss, embed_gloss_graph, embed_pose,
    embed_pose_graph, encode, encode_glosses, encode_graph, positional_encoding, shift_right,
    teacher_forced, DecoderGraph, DecoderState, EncoderOutput,
};
pub use params::{
    Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, ModelConfig, ModelParams, Norm,
    Weights, LAYER_NORM_EPS,
};
pub use vocab::{GlossSequence, GlossVocab, PoseSequence, BOS, EOS, PAD, RESERVED};
