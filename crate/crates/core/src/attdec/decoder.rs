//! Single-layer LSTM attention decoder.
//!
//! One step attends over the encoder with the previous LSTM output as query,
//! feeds `[embed(c_{l−1}); r_l]` to the LSTM and projects the new hidden
//! vector to logits over `U ∪ {eos}`.

use crate::attdec::fusion::{fuse, FusionConfig};
use crate::attdec::lm::{RnnLm, RnnLmCache};
use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, AttentionKeys, LocationAttention};
use crate::nn::linear::{Embedding, Linear};
use crate::nn::lstm::{LstmCache, LstmCell};
use crate::nn::math::log_softmax_backward;
use crate::params::{Gradients, ParamStore, Params};
use crate::tensor::Tensor;
use crate::vocab::{Label, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub att_dim: usize,
    pub att_filters: usize,
    /// Odd width of the centered location filters.
    pub att_width: usize,
}

impl Default for DecoderConfig {
    /// 320 cells; 10 location filters reaching 100 frames to each side.
    fn default() -> Self {
        Self {
            hidden: 320,
            att_dim: 320,
            att_filters: 10,
            att_width: 201,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Attention weights of the previous step.
    pub att: Vec<f64>,
    /// Label fed at the next step.
    pub prev: Label,
}

/// Encoder output and its attention key projections for one utterance.
#[derive(Clone, Debug)]
pub struct DecoderContext<'a> {
    pub enc: &'a Tensor,
    keys: AttentionKeys,
}

impl DecoderContext<'_> {
    pub fn frames(&self) -> usize {
        self.enc.rows()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStepCache {
    input_index: usize,
    att: AttentionCache,
    lstm: LstmCache,
    h: Vec<f64>,
}

/// LM parameters paired with the model that reads them.
#[derive(Clone, Copy, Debug)]
pub struct LmHandle<'a> {
    pub lm: &'a RnnLm,
    pub params: &'a Params,
}

/// Forward record of a teacher-forced pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub nll: f64,
    /// Fused log-distributions, one per scored position (targets then eos).
    pub step_logp: Vec<Vec<f64>>,
    targets: Vec<usize>,
    caches: Vec<DecoderStepCache>,
    lm_caches: Option<Vec<RnnLmCache>>,
    lm_weight: f64,
    keys_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    config: DecoderConfig,
    vocab: Vocab,
    embed: Embedding,
    att: LocationAttention,
    lstm: LstmCell,
    out: Linear,
}

impl AttentionDecoder {
    pub fn new(store: &mut ParamStore, vocab: &Vocab, enc_dim: usize, config: DecoderConfig) -> Result<Self> {
        if config.hidden == 0 || config.att_dim == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        let att = LocationAttention::new(
            store,
            "dec.att",
            config.hidden,
            enc_dim,
            config.att_dim,
            config.att_filters,
            config.att_width,
        )?;
        Ok(Self {
            embed: Embedding::new(store, "dec.embed", vocab.in_dim(), config.hidden),
            att,
            lstm: LstmCell::new(store, "dec.lstm", config.hidden + enc_dim, config.hidden),
            out: Linear::new(store, "dec.out", config.hidden, vocab.out_dim()),
            vocab: vocab.clone(),
            config,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn prepare<'a>(&self, params: &Params, enc: &'a Tensor) -> Result<DecoderContext<'a>> {
        let keys = self.att.prepare(params, enc)?;
        Ok(DecoderContext { enc, keys })
    }

    pub fn initial_state(&self, ctx: &DecoderContext<'_>) -> DecoderState {
        let (h, c) = self.lstm.zero_state();
        DecoderState {
            h,
            c,
            att: LocationAttention::initial_weights(ctx.frames()),
            prev: self.vocab.sos(),
        }
    }

    /// One decoder step consuming `state.prev`. Returns pre-softmax logits
    /// over `U ∪ {eos}` and the advanced state; its `prev` still names the
    /// consumed label until the caller records the emitted one.
    pub fn step(
        &self,
        params: &Params,
        ctx: &DecoderContext<'_>,
        state: &DecoderState,
    ) -> Result<(Vec<f64>, DecoderState, DecoderStepCache)> {
        let input_index = self.vocab.in_index(state.prev)?;
        let (a, r, att_cache) = self.att.step(params, ctx.enc, &ctx.keys, &state.h, &state.att)?;
        let mut x = self.embed.forward(params, input_index).to_vec();
        x.extend_from_slice(&r);
        let (h, c, lstm_cache) = self.lstm.step(params, &x, &state.h, &state.c)?;
        let logits = self.out.forward(params, &h);
        let cache = DecoderStepCache {
            input_index,
            att: att_cache,
            lstm: lstm_cache,
            h: h.clone(),
        };
        Ok((
            logits,
            DecoderState {
                h,
                c,
                att: a,
                prev: state.prev,
            },
            cache,
        ))
    }

    /// Scores `target · eos` with ground-truth history.
    pub fn teacher_forced(
        &self,
        params: &Params,
        enc: &Tensor,
        target: &[Label],
        fusion: &FusionConfig,
        lm: Option<LmHandle<'_>>,
    ) -> Result<TeacherForced> {
        self.vocab.check_target(target)?;
        fusion.validate()?;
        if fusion.uses_lm() && lm.is_none() {
            return Err(Error::Config(format!("fusion mode `{}` needs a language model", fusion.mode)));
        }
        let ctx = self.prepare(params, enc)?;
        let targets: Vec<usize> = target
            .iter()
            .chain(std::iter::once(&self.vocab.eos()))
            .map(|l| self.vocab.out_index(*l))
            .collect::<Result<_>>()?;
        let (lm_logits, lm_caches) = match (fusion.uses_lm(), lm) {
            (true, Some(h)) => {
                let (z, c) = h.lm.run(h.params, target)?;
                (Some(z), Some(c))
            }
            _ => (None, None),
        };
        let mut state = self.initial_state(&ctx);
        let mut caches = Vec::with_capacity(targets.len());
        let mut step_logp = Vec::with_capacity(targets.len());
        let mut nll = 0.0;
        for (l, &k) in targets.iter().enumerate() {
            let (z, mut next, cache) = self.step(params, &ctx, &state)?;
            let lp = fuse(&z, lm_logits.as_ref().map(|v| v[l].as_slice()), fusion)?;
            nll -= lp[k];
            step_logp.push(lp);
            caches.push(cache);
            if l < target.len() {
                next.prev = target[l];
            }
            state = next;
        }
        Ok(TeacherForced {
            nll,
            step_logp,
            targets,
            caches,
            lm_caches,
            lm_weight: fusion.lm_weight(),
            keys_len: ctx.frames(),
        })
    }

    /// Backward of [`teacher_forced`](Self::teacher_forced) for the loss
    /// `scale · nll`. Decoder gradients go to `grads`; LM gradients only when
    /// `lm_grads` is given (joint training). Returns `∂(scale · nll)/∂enc`.
    pub fn teacher_forced_backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        enc: &Tensor,
        tf: &TeacherForced,
        scale: f64,
        lm: Option<(LmHandle<'_>, &mut Gradients)>,
    ) -> Tensor {
        let hs = self.config.hidden;
        let mut denc = Tensor::zeros(enc.dims());
        let mut dkeys = Tensor::zeros(&[tf.keys_len, self.att.att_dim]);
        let mut dlogits_all = Vec::with_capacity(tf.targets.len());
        for (lp, &k) in tf.step_logp.iter().zip(&tf.targets) {
            let mut d = vec![0.0; lp.len()];
            d[k] = -scale;
            dlogits_all.push(log_softmax_backward(lp, &d));
        }
        let (mut dh, mut dc) = (vec![0.0; hs], vec![0.0; hs]);
        let mut da = vec![0.0; tf.keys_len];
        for (cache, dz) in tf.caches.iter().zip(&dlogits_all).rev() {
            let mut dh_step = self.out.backward(params, grads, &cache.h, dz);
            dh_step.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
            let (dx, dh_prev, dc_prev) = self.lstm.backward(params, grads, &cache.lstm, &dh_step, &dc);
            self.embed.backward(grads, cache.input_index, &dx[..hs]);
            let (dq, da_prev) =
                self.att
                    .backward(params, grads, enc, &cache.att, &da, &dx[hs..], &mut dkeys, &mut denc);
            dh = dh_prev;
            dh.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
            dc = dc_prev;
            da = da_prev;
        }
        self.att.prepare_backward(params, grads, enc, &dkeys, &mut denc);

        if let (Some((handle, lm_grads)), Some(lm_caches)) = (lm, &tf.lm_caches) {
            let w = tf.lm_weight;
            let dlm: Vec<Vec<f64>> = dlogits_all.iter().map(|d| d.iter().map(|x| w * x).collect()).collect();
            handle.lm.run_backward(handle.params, lm_grads, lm_caches, &dlm);
        }
        denc
    }

    /// `−log p_att(target | X)` with gradients accumulated into `grads`
    /// (and `lm_grads` in joint mode). Returns the NLL and `∂nll/∂enc`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_nll(
        &self,
        params: &Params,
        grads: &mut Gradients,
        enc: &Tensor,
        target: &[Label],
        fusion: &FusionConfig,
        lm: Option<LmHandle<'_>>,
        lm_grads: Option<&mut Gradients>,
    ) -> Result<(f64, Tensor)> {
        let tf = self.teacher_forced(params, enc, target, fusion, lm)?;
        let lm_part = match (lm, lm_grads) {
            (Some(h), Some(g)) => Some((h, g)),
            _ => None,
        };
        let denc = self.teacher_forced_backward(params, grads, enc, &tf, 1.0, lm_part);
        Ok((tf.nll, denc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::math::softmax;

    fn tiny(store: &mut ParamStore, vocab: &Vocab) -> AttentionDecoder {
        let cfg = DecoderConfig {
            hidden: 3,
            att_dim: 4,
            att_filters: 2,
            att_width: 3,
        };
        AttentionDecoder::new(store, vocab, 2, cfg).unwrap()
    }

    #[test]
    fn zero_params_uniform() {
        let vocab = Vocab::letters(4).unwrap();
        let mut store = ParamStore::new(9);
        let dec = tiny(&mut store, &vocab);
        store.zero_params();
        let enc = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let ctx = dec.prepare(store.params(), &enc).unwrap();
        let s = dec.initial_state(&ctx);
        let (z, _, _) = dec.step(store.params(), &ctx, &s).unwrap();
        for p in softmax(&z) {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let tf = dec
            .teacher_forced(store.params(), &enc, &vocab.encode("ab").unwrap(), &FusionConfig::none(), None)
            .unwrap();
        assert!((tf.nll - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_context() {
        let vocab = Vocab::letters(2).unwrap();
        let mut store = ParamStore::new(9);
        let dec = tiny(&mut store, &vocab);
        let enc = Tensor::matrix(1, 2, vec![0.7, -0.3]);
        let ctx = dec.prepare(store.params(), &enc).unwrap();
        let s = dec.initial_state(&ctx);
        let (_, next, cache) = dec.step(store.params(), &ctx, &s).unwrap();
        assert_eq!(next.att, vec![1.0]);
        assert_eq!(&cache.lstm_input_context(3), &[0.7, -0.3]);
    }

    #[test]
    fn empty_encoder_rejected() {
        let vocab = Vocab::letters(2).unwrap();
        let mut store = ParamStore::new(9);
        let dec = tiny(&mut store, &vocab);
        assert!(matches!(
            dec.prepare(store.params(), &Tensor::zeros(&[0, 2])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn empty_target_scores_only_eos() {
        let vocab = Vocab::letters(2).unwrap();
        let mut store = ParamStore::new(9);
        let dec = tiny(&mut store, &vocab);
        let enc = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let tf = dec.teacher_forced(store.params(), &enc, &[], &FusionConfig::none(), None).unwrap();
        assert_eq!(tf.step_logp.len(), 1);
        assert!(tf.nll > 0.0);
    }

    #[test]
    fn fusion_without_lm_is_config_error() {
        let vocab = Vocab::letters(2).unwrap();
        let mut store = ParamStore::new(9);
        let dec = tiny(&mut store, &vocab);
        let enc = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let err = dec
            .teacher_forced(store.params(), &enc, &[], &FusionConfig::separate(0.3), None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    impl DecoderStepCache {
        fn lstm_input_context(&self, hidden: usize) -> Vec<f64> {
            self.lstm.input()[hidden..].to_vec()
        }
    }
}
