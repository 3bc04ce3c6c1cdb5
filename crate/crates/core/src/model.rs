//! The joint CTC/attention network: one shared encoder feeding a CTC head and
//! an attention decoder, plus the optional character LM.

use crate::attdec::{AttentionDecoder, DecoderConfig, FusionConfig, LmHandle, RnnLm};
use crate::ctc::{ctc_loss, PosteriorGrid};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, FeatureSequence};
use crate::error::{check_dim, Result};
use crate::nn::linear::Linear;
use crate::nn::math::log_softmax_backward;
use crate::params::{Gradients, ParamStore, Params};
use crate::tensor::{add_assign, Tensor};
use crate::train::mtl_loss;
use crate::vocab::{Label, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    ctc_head: Linear,
    decoder: AttentionDecoder,
    store: ParamStore,
}

/// Per-utterance losses. `skipped` marks a CTC-unalignable target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtteranceLoss {
    pub ctc_nll: f64,
    pub att_nll: f64,
    pub mtl: f64,
    pub skipped: bool,
}

/// The encoder output of one utterance together with its CTC posteriors.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub enc: EncoderOutput,
    pub grid: PosteriorGrid,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let encoder = Encoder::new(&mut store, config.encoder.clone())?;
        let enc_dim = config.encoder.output_dim();
        let ctc_head = Linear::new(&mut store, "ctc.out", enc_dim, config.vocab.ctc_dim());
        let decoder = AttentionDecoder::new(&mut store, &config.vocab, enc_dim, config.decoder.clone())?;
        Ok(Self {
            config,
            encoder,
            ctc_head,
            decoder,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &AttentionDecoder {
        &self.decoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &Params {
        self.store.params()
    }

    pub fn ctc_logits(&self, params: &Params, enc: &Tensor) -> Result<Tensor> {
        check_dim("ctc head input", self.ctc_head.in_dim, enc.cols())?;
        let mut logits = Tensor::zeros(&[enc.rows(), self.ctc_head.out_dim]);
        for t in 0..enc.rows() {
            logits.row_mut(t).copy_from_slice(&self.ctc_head.forward(params, enc.row(t)));
        }
        Ok(logits)
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<Encoded> {
        let params = self.params();
        let enc = self.encoder.encode(params, x)?;
        let grid = PosteriorGrid::from_logits(&self.ctc_logits(params, &enc.hidden)?);
        Ok(Encoded { enc, grid })
    }

    /// Forward and backward of `λ·ctc_nll + (1−λ)·att_nll` for one utterance;
    /// gradients accumulate into the model store (and `lm_grads` in joint fusion).
    pub fn accumulate_gradients(
        &mut self,
        x: &FeatureSequence,
        target: &[Label],
        lambda: f64,
        fusion: &FusionConfig,
        lm: Option<LmHandle<'_>>,
        lm_grads: Option<&mut Gradients>,
    ) -> Result<UtteranceLoss> {
        let (params, grads) = self.store.split_mut();
        let (enc, enc_cache) = self.encoder.forward(params, x)?;
        let logits = {
            let mut l = Tensor::zeros(&[enc.len(), self.ctc_head.out_dim]);
            for t in 0..enc.len() {
                l.row_mut(t).copy_from_slice(&self.ctc_head.forward(params, enc.hidden.row(t)));
            }
            l
        };
        let grid = PosteriorGrid::from_logits(&logits);
        let ctc = ctc_loss(&grid, target)?;
        if !ctc.alignable {
            return Ok(UtteranceLoss {
                ctc_nll: ctc.nll,
                att_nll: f64::NAN,
                mtl: f64::INFINITY,
                skipped: true,
            });
        }
        let tf = self.decoder.teacher_forced(params, &enc.hidden, target, fusion, lm)?;
        let mtl = mtl_loss(lambda, ctc.nll, tf.nll);

        let mut denc = Tensor::zeros(enc.hidden.dims());
        if lambda > 0.0 {
            for t in 0..enc.len() {
                let dlogp: Vec<f64> = ctc.grad.row(t).iter().map(|g| lambda * g).collect();
                let dz = log_softmax_backward(grid.log_probs().row(t), &dlogp);
                let dx = self.ctc_head.backward(params, grads, enc.hidden.row(t), &dz);
                add_assign(denc.row_mut(t), &dx);
            }
        }
        if lambda < 1.0 {
            let lm_part = match (lm, lm_grads) {
                (Some(h), Some(g)) => Some((h, g)),
                _ => None,
            };
            let d = self
                .decoder
                .teacher_forced_backward(params, grads, &enc.hidden, &tf, 1.0 - lambda, lm_part);
            add_assign(denc.data_mut(), d.data());
        }
        self.encoder.backward(params, grads, &enc_cache, &denc);
        Ok(UtteranceLoss {
            ctc_nll: ctc.nll,
            att_nll: tf.nll,
            mtl,
            skipped: false,
        })
    }
}

/// A character LM with its own parameter store.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub lm: RnnLm,
    pub store: ParamStore,
}

impl LanguageModel {
    pub fn new(vocab: &Vocab, hidden: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let lm = RnnLm::new(&mut store, vocab, hidden)?;
        Ok(Self { lm, store })
    }

    pub fn handle(&self) -> LmHandle<'_> {
        LmHandle {
            lm: &self.lm,
            params: self.store.params(),
        }
    }
}
