//! Fixtures shared by the benchmarks.

use e2ea_core::attdec::DecoderConfig;
use e2ea_core::train::generate_toy_dataset;
use e2ea_core::{EncoderConfig, Model, ModelConfig, PosteriorGrid, Tensor, ToyTaskSpec, Utterance};

/// Deterministic logits in (-2, 2) without pulling in an RNG.
pub fn grid(frames: usize, width: usize) -> PosteriorGrid {
    let logits = (0..frames * width)
        .map(|i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 4.0)
        .collect();
    PosteriorGrid::from_logits(&Tensor::from_vec(&[frames, width], logits))
}

/// The toy-preset architecture with `hidden` cells everywhere.
pub fn toy_model(hidden: usize) -> (Model, Vec<Utterance>) {
    let spec = ToyTaskSpec::default();
    let config = ModelConfig {
        vocab: spec.vocab().expect("toy vocab"),
        encoder: EncoderConfig {
            num_layers: 3,
            hidden,
            proj: hidden,
            ..EncoderConfig::blstm(spec.feat_dim)
        },
        decoder: DecoderConfig {
            hidden,
            att_dim: hidden,
            att_filters: 4,
            att_width: 5,
        },
    };
    let model = Model::new(config, 1).expect("toy model");
    let data = generate_toy_dataset(&spec, 8, 7).expect("toy data");
    (model, data)
}
