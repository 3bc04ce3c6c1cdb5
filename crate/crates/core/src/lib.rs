//! Joint CTC/attention end-to-end speech recognition in plain `f64` Rust.
//!
//! A shared encoder (projected BLSTM layers with optional VGG front-end)
//! feeds a CTC head and a location-aware attention decoder. Training
//! minimizes `λ·CTC + (1−λ)·attention`; decoding runs attention-only beam
//! search, CTC rescoring of the n-best list, or one-pass joint scoring with
//! CTC prefix probabilities, optionally fusing a character LSTM LM at the
//! logit level. Every layer has a hand-written backward pass that is checked
//! against central differences.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::manual_div_ceil, clippy::manual_is_multiple_of)]

pub mod attdec;
pub mod ctc;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use attdec::{FusionConfig, FusionMode};
pub use ctc::{ctc_full_logprob, ctc_loss, CtcPrefixState, PosteriorGrid};
pub use decode::{BeamConfig, DecodeMode, DecodeResult, NBestEntry, Recognizer};
pub use encoder::{EncoderConfig, EncoderOutput, EncoderVariant, FeatureSequence};
pub use error::{Error, Result};
pub use metrics::{cer, edit_distance, CerAccumulator};
pub use model::{Encoded, LanguageModel, Model, ModelConfig};
pub use params::{Gradients, ParamId, ParamStore, Params};
pub use tensor::Tensor;
pub use train::{AdaDelta, AdaDeltaConfig, EpochStats, MtlConfig, ToyTaskSpec, Utterance};
pub use vocab::{Label, LabelSequence, Vocab};
