//! Attention decoder, character RNN-LM, and logit-level fusion.

pub mod decoder;
pub mod fusion;
pub mod lm;

pub use decoder::{AttentionDecoder, DecoderConfig, DecoderContext, DecoderState, LmHandle, TeacherForced};
pub use fusion::{fuse, FusionConfig, FusionMode};
pub use lm::{RnnLm, RnnLmState};
