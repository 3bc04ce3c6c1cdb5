use e2ea_core::attdec::DecoderConfig;
use e2ea_core::train::{generate_toy_dataset, train_epoch, train_lm_epoch, lm_perplexity};
use e2ea_core::{
    AdaDelta, AdaDeltaConfig, EncoderConfig, FusionConfig, Gradients, LanguageModel, Model, ModelConfig, MtlConfig,
    Tensor, ToyTaskSpec,
};

fn small_spec() -> ToyTaskSpec {
    ToyTaskSpec {
        vocab_size: 3,
        feat_dim: 4,
        dur_min: 3,
        dur_max: 5,
        len_min: 1,
        len_max: 3,
        ..ToyTaskSpec::default()
    }
}

fn small_model(spec: &ToyTaskSpec, seed: u64) -> Model {
    let config = ModelConfig {
        vocab: spec.vocab().unwrap(),
        encoder: EncoderConfig {
            num_layers: 3,
            hidden: 6,
            proj: 6,
            ..EncoderConfig::blstm(spec.feat_dim)
        },
        decoder: DecoderConfig {
            hidden: 6,
            att_dim: 6,
            att_filters: 2,
            att_width: 3,
        },
    };
    Model::new(config, seed).unwrap()
}

fn grads_at(model: &mut Model, spec: &ToyTaskSpec, lambda: f64) -> Gradients {
    let utt = &generate_toy_dataset(spec, 1, 5).unwrap()[0];
    model.store_mut().zero_grads();
    model
        .accumulate_gradients(&utt.features, &utt.labels, lambda, &FusionConfig::none(), None, None)
        .unwrap();
    model.store().grads().clone()
}

#[test]
fn lambda_zero_leaves_ctc_head_untouched() {
    let spec = small_spec();
    let mut model = small_model(&spec, 3);
    let g = grads_at(&mut model, &spec, 0.0);
    for name in ["ctc.out.weight", "ctc.out.bias"] {
        let id = model.params().id(name).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 0.0), "{name}");
    }
    let g1 = grads_at(&mut model, &spec, 1.0);
    let id = model.params().id("dec.out.weight").unwrap();
    assert!(g1.get(id).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mtl_gradient_is_linear_in_lambda() {
    let spec = small_spec();
    let mut model = small_model(&spec, 4);
    let ctc = grads_at(&mut model, &spec, 1.0);
    let att = grads_at(&mut model, &spec, 0.0);
    for lambda in [0.2, 0.5, 0.9] {
        let mixed = grads_at(&mut model, &spec, lambda);
        for ((m, c), a) in mixed.tensors().iter().zip(ctc.tensors()).zip(att.tensors()) {
            for ((&m, &c), &a) in m.data().iter().zip(c.data()).zip(a.data()) {
                let expect = lambda * c + (1.0 - lambda) * a;
                assert!((m - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{m} vs {expect}");
            }
        }
    }
}

fn run(seed: u64, epochs: usize) -> (Model, Vec<f64>) {
    let spec = small_spec();
    let data = generate_toy_dataset(&spec, 12, 9).unwrap();
    let mut model = small_model(&spec, seed);
    let mut opt = AdaDelta::new(AdaDeltaConfig::default(), model.params());
    let cfg = MtlConfig {
        seed,
        ..MtlConfig::default()
    };
    let mut losses = Vec::new();
    for epoch in 1..=epochs {
        let st = train_epoch(&mut model, &mut opt, &data, &cfg, &FusionConfig::none(), None, None, epoch).unwrap();
        assert_eq!(st.trained + st.skipped, data.len());
        losses.push(st.mtl);
    }
    (model, losses)
}

#[test]
fn training_is_bitwise_reproducible() {
    let (a, la) = run(7, 2);
    let (b, lb) = run(7, 2);
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
    let (c, _) = run(8, 2);
    assert_ne!(a.params(), c.params());
}

#[test]
fn unalignable_utterances_are_skipped() {
    let spec = small_spec();
    let mut data = generate_toy_dataset(&spec, 3, 9).unwrap();
    data[1].features = e2ea_core::FeatureSequence::new(Tensor::zeros(&[2, spec.feat_dim])).unwrap();
    data[1].labels = spec.vocab().unwrap().encode("aab").unwrap();
    let mut model = small_model(&spec, 1);
    let mut opt = AdaDelta::new(AdaDeltaConfig::default(), model.params());
    let st = train_epoch(&mut model, &mut opt, &data, &MtlConfig::default(), &FusionConfig::none(), None, None, 1)
        .unwrap();
    assert_eq!((st.trained, st.skipped), (2, 1));
    assert!(st.mtl.is_finite());
}

#[test]
fn lm_training_reduces_perplexity() {
    let spec = small_spec();
    let vocab = spec.vocab().unwrap();
    let text: Vec<_> = ["abc", "abc", "acb", "abc", "bca"]
        .iter()
        .map(|s| vocab.encode(s).unwrap())
        .collect();
    let mut lm = LanguageModel::new(&vocab, 8, 2).unwrap();
    let mut opt = AdaDelta::new(
        AdaDeltaConfig {
            eps: 1e-6,
            ..AdaDeltaConfig::default()
        },
        lm.store.params(),
    );
    let before = lm_perplexity(&lm, &text).unwrap();
    for epoch in 1..=10 {
        train_lm_epoch(&mut lm, &mut opt, &text, 5.0, 1, epoch).unwrap();
    }
    let after = lm_perplexity(&lm, &text).unwrap();
    assert!(after < before, "{after} vs {before}");
}
