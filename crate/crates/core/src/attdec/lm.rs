//! Character-level LSTM language model over `U ∪ {eos}`.

use crate::error::{Error, Result};
use crate::nn::linear::{Embedding, Linear};
use crate::nn::lstm::{LstmCache, LstmCell};
use crate::nn::math::{log_softmax, log_softmax_backward};
use crate::params::{Gradients, ParamStore, Params};
use crate::vocab::{Label, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct RnnLmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub prev: Label,
}

#[derive(Clone, Debug)]
pub struct RnnLmCache {
    input_index: usize,
    lstm: LstmCache,
    h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RnnLm {
    vocab: Vocab,
    embed: Embedding,
    lstm: LstmCell,
    out: Linear,
}

impl RnnLm {
    pub fn new(store: &mut ParamStore, vocab: &Vocab, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("LM hidden size must be positive".into()));
        }
        Ok(Self {
            vocab: vocab.clone(),
            embed: Embedding::new(store, "lm.embed", vocab.in_dim(), hidden),
            lstm: LstmCell::new(store, "lm.lstm", hidden, hidden),
            out: Linear::new(store, "lm.out", hidden, vocab.out_dim()),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden_size
    }

    pub fn initial_state(&self) -> RnnLmState {
        let (h, c) = self.lstm.zero_state();
        RnnLmState {
            h,
            c,
            prev: self.vocab.sos(),
        }
    }

    /// Consumes `label` (a character or sos) and returns logits for the next one.
    pub fn step(&self, params: &Params, state: &RnnLmState, label: Label) -> Result<(Vec<f64>, RnnLmState, RnnLmCache)> {
        let idx = self.vocab.in_index(label)?;
        let x = self.embed.forward(params, idx);
        let (h, c, lstm) = self.lstm.step(params, x, &state.h, &state.c)?;
        let logits = self.out.forward(params, &h);
        let cache = RnnLmCache {
            input_index: idx,
            lstm,
            h: h.clone(),
        };
        Ok((logits, RnnLmState { h, c, prev: label }, cache))
    }

    /// Backward of one step given `d logits` and the gradient flowing into
    /// this step's `(h, c)` from later steps; returns gradients for the previous state.
    pub fn step_backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        cache: &RnnLmCache,
        dlogits: &[f64],
        dh_next: &[f64],
        dc_next: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut dh = self.out.backward(params, grads, &cache.h, dlogits);
        dh.iter_mut().zip(dh_next).for_each(|(a, b)| *a += b);
        let (dx, dh_prev, dc_prev) = self.lstm.backward(params, grads, &cache.lstm, &dh, dc_next);
        self.embed.backward(grads, cache.input_index, &dx);
        (dh_prev, dc_prev)
    }

    /// Logits for every position of `sos · labels`, with caches.
    pub fn run(&self, params: &Params, labels: &[Label]) -> Result<(Vec<Vec<f64>>, Vec<RnnLmCache>)> {
        let mut state = self.initial_state();
        let mut logits = Vec::with_capacity(labels.len() + 1);
        let mut caches = Vec::with_capacity(labels.len() + 1);
        let inputs = std::iter::once(self.vocab.sos()).chain(labels.iter().copied());
        for l in inputs {
            let (z, next, cache) = self.step(params, &state, l)?;
            logits.push(z);
            caches.push(cache);
            state = next;
        }
        Ok((logits, caches))
    }

    /// Backpropagates per-position logit gradients through the whole sequence.
    pub fn run_backward(&self, params: &Params, grads: &mut Gradients, caches: &[RnnLmCache], dlogits: &[Vec<f64>]) {
        let hs = self.hidden();
        let (mut dh, mut dc) = (vec![0.0; hs], vec![0.0; hs]);
        for (cache, dz) in caches.iter().zip(dlogits).rev() {
            (dh, dc) = self.step_backward(params, grads, cache, dz, &dh, &dc);
        }
    }

    /// `−log p(labels · eos)`; accumulates gradients when `grads` is given.
    pub fn sequence_nll(&self, params: &Params, labels: &[Label], grads: Option<&mut Gradients>) -> Result<f64> {
        self.vocab.check_target(labels)?;
        let (logits, caches) = self.run(params, labels)?;
        let targets: Vec<usize> = labels
            .iter()
            .chain(std::iter::once(&self.vocab.eos()))
            .map(|l| self.vocab.out_index(*l))
            .collect::<Result<_>>()?;
        let mut nll = 0.0;
        let mut dlogits = Vec::with_capacity(targets.len());
        for (z, &k) in logits.iter().zip(&targets) {
            let lp = log_softmax(z);
            nll -= lp[k];
            let mut d = vec![0.0; lp.len()];
            d[k] = -1.0;
            dlogits.push(log_softmax_backward(&lp, &d));
        }
        if let Some(g) = grads {
            self.run_backward(params, g, &caches, &dlogits);
        }
        Ok(nll)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::math::softmax;

    #[test]
    fn zero_params_uniform() {
        let vocab = Vocab::letters(4).unwrap();
        let mut store = ParamStore::new(3);
        let lm = RnnLm::new(&mut store, &vocab, 6).unwrap();
        store.zero_params();
        let (z, _, _) = lm.step(store.params(), &lm.initial_state(), vocab.sos()).unwrap();
        for p in softmax(&z) {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let ab = vocab.encode("ab").unwrap();
        let nll = lm.sequence_nll(store.params(), &ab, None).unwrap();
        assert!((nll - 4.828_313_737_302_301).abs() < 1e-12);
        assert!((nll - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_step() {
        let vocab = Vocab::letters(3).unwrap();
        let mut store = ParamStore::new(3);
        let lm = RnnLm::new(&mut store, &vocab, 4).unwrap();
        let s = lm.initial_state();
        let a = lm.step(store.params(), &s, Label(2)).unwrap();
        let b = lm.step(store.params(), &s, Label(2)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn invalid_label() {
        let vocab = Vocab::letters(3).unwrap();
        let mut store = ParamStore::new(3);
        let lm = RnnLm::new(&mut store, &vocab, 4).unwrap();
        let s = lm.initial_state();
        assert!(lm.step(store.params(), &s, vocab.eos()).is_err());
        assert!(lm.step(store.params(), &s, vocab.blank()).is_err());
    }
}
