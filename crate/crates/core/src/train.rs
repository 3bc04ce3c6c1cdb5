//! Multi-task objective, AdaDelta with global-norm clipping, synthetic data,
//! and the per-epoch training loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attdec::{FusionConfig, LmHandle};
use crate::encoder::{speed_perturb, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Model};
use crate::params::{Gradients, Params};
use crate::tensor::Tensor;
use crate::vocab::{Label, LabelSequence, Vocab};

/// `λ·ctc_nll + (1−λ)·att_nll`, the negated multi-task objective.
pub fn mtl_loss(lambda: f64, ctc_nll: f64, att_nll: f64) -> f64 {
    if lambda == 0.0 {
        att_nll
    } else if lambda == 1.0 {
        ctc_nll
    } else {
        lambda * ctc_nll + (1.0 - lambda) * att_nll
    }
}

/// Rescales all gradients by `tau / norm` when their joint L2 norm exceeds
/// `tau`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Gradients], tau: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > tau {
        let s = tau / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-8 }
    }
}

impl AdaDeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adadelta needs 0 <= rho < 1 and eps > 0, got rho={} eps={}",
                self.rho, self.eps
            )));
        }
        Ok(())
    }
}

/// Running averages `E[g²]` and `E[Δx²]` for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    pub config: AdaDeltaConfig,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl AdaDelta {
    pub fn new(config: AdaDeltaConfig, params: &Params) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        Self {
            config,
            sq_grad: zeros(),
            sq_update: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Gradients) {
        let AdaDeltaConfig { rho, eps } = self.config;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let x = params.get_mut(id).data_mut();
            let g = grads.get(id).data();
            let eg = self.sq_grad[i].data_mut();
            let ex = self.sq_update[i].data_mut();
            for j in 0..x.len() {
                eg[j] = rho * eg[j] + (1.0 - rho) * g[j] * g[j];
                let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g[j];
                ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
                x[j] += dx;
            }
        }
    }

    pub fn accumulators(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.sq_grad.iter().zip(&self.sq_update)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            epochs: 15,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Synthetic character transduction: each label emits a noisy copy of its
/// template vector for a random number of frames, with `gap` noise-only
/// frames between consecutive labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub gap: usize,
    pub noise: f64,
    pub len_min: usize,
    pub len_max: usize,
    /// Seeds the templates; shared by every split of one task.
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 5,
            feat_dim: 8,
            dur_min: 6,
            dur_max: 10,
            gap: 2,
            noise: 0.5,
            len_min: 3,
            len_max: 8,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.vocab_size > 26 || self.feat_dim == 0 {
            return bad("toy task needs 1..=26 characters and a positive feature dim");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("toy task durations need 1 <= dur_min <= dur_max");
        }
        if self.len_min > self.len_max || self.len_max == 0 {
            return bad("toy task lengths need len_min <= len_max and len_max >= 1");
        }
        if !(self.noise >= 0.0) {
            return bad("toy task noise must be non-negative");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::letters(self.vocab_size)
    }

    /// One unit-variance Gaussian template per character, pairwise distinct.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.vocab_size);
        while out.len() < self.vocab_size {
            let t: Vec<f64> = (0..self.feat_dim).map(|_| normal.sample(&mut rng)).collect();
            if out.iter().all(|o| o != &t) {
                out.push(t);
            }
        }
        out
    }
}

/// `n` utterances drawn with `sample_seed`; identical seeds give identical data.
pub fn generate_toy_dataset(spec: &ToyTaskSpec, n: usize, sample_seed: u64) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let templates = spec.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feat_dim;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(spec.len_min..=spec.len_max);
        let labels: Vec<Label> = (0..len)
            .map(|_| Label(rng.gen_range(1..=spec.vocab_size as u32)))
            .collect();
        let mut frames = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if i > 0 {
                for _ in 0..spec.gap * d {
                    frames.push(spec.noise * normal.sample(&mut rng));
                }
            }
            let dur = rng.gen_range(spec.dur_min..=spec.dur_max);
            let tpl = &templates[l.id() - 1];
            for _ in 0..dur {
                for v in tpl {
                    frames.push(v + spec.noise * normal.sample(&mut rng));
                }
            }
        }
        // An empty label sequence still needs one frame of input.
        if frames.is_empty() {
            frames.extend((0..d).map(|_| spec.noise * normal.sample(&mut rng)));
        }
        let t_len = frames.len() / d;
        data.push(Utterance {
            features: FeatureSequence::new(Tensor::matrix(t_len, d, frames))?,
            labels,
        });
    }
    Ok(data)
}

/// Appends time-rescaled copies of every utterance for each factor.
pub fn speed_augment(data: &[Utterance], factors: &[f64], with_deltas: bool) -> Result<Vec<Utterance>> {
    let mut out = data.to_vec();
    for &f in factors {
        for u in data {
            let frames = speed_perturb(&u.features.frames, f)?;
            let features = if with_deltas {
                FeatureSequence::with_deltas(frames)?
            } else {
                FeatureSequence::new(frames)?
            };
            out.push(Utterance {
                features,
                labels: u.labels.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub ctc_nll: f64,
    pub att_nll: f64,
    pub mtl: f64,
    pub trained: usize,
    pub skipped: usize,
}

/// An LM trained together with the model (joint fusion).
pub struct JointLm<'a> {
    pub lm: &'a mut LanguageModel,
    pub optimizer: &'a mut AdaDelta,
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` in a seeded shuffled order, batch size one.
///
/// With `FusionMode::Separate` the LM only contributes logits; with
/// `FusionMode::Joint` it is updated alongside the model.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut AdaDelta,
    data: &[Utterance],
    cfg: &MtlConfig,
    fusion: &FusionConfig,
    frozen_lm: Option<&LanguageModel>,
    mut joint_lm: Option<JointLm<'_>>,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let mut stats = EpochStats {
        epoch,
        ctc_nll: 0.0,
        att_nll: 0.0,
        mtl: 0.0,
        trained: 0,
        skipped: 0,
    };
    for idx in epoch_order(data.len(), cfg.seed, epoch) {
        let utt = &data[idx];
        model.store_mut().zero_grads();
        let loss = match joint_lm.as_mut() {
            Some(j) => {
                j.lm.store.zero_grads();
                let (lm_params, lm_grads) = j.lm.store.split_mut();
                let handle = LmHandle {
                    lm: &j.lm.lm,
                    params: lm_params,
                };
                model.accumulate_gradients(
                    &utt.features,
                    &utt.labels,
                    cfg.lambda,
                    fusion,
                    Some(handle),
                    Some(lm_grads),
                )?
            }
            None => model.accumulate_gradients(
                &utt.features,
                &utt.labels,
                cfg.lambda,
                fusion,
                frozen_lm.map(LanguageModel::handle),
                None,
            )?,
        };
        if loss.skipped {
            stats.skipped += 1;
            continue;
        }
        match joint_lm.as_mut() {
            Some(j) => {
                let mut model_grads = std::mem::take(model.store_mut().grads_mut());
                let mut lm_grads = std::mem::take(j.lm.store.grads_mut());
                clip_grad_norm(&mut [&mut model_grads, &mut lm_grads], cfg.clip_norm);
                optimizer.update(model.store_mut().params_mut(), &model_grads);
                j.optimizer.update(j.lm.store.params_mut(), &lm_grads);
                *model.store_mut().grads_mut() = model_grads;
                *j.lm.store.grads_mut() = lm_grads;
            }
            None => {
                let mut g = std::mem::take(model.store_mut().grads_mut());
                clip_grad_norm(&mut [&mut g], cfg.clip_norm);
                optimizer.update(model.store_mut().params_mut(), &g);
                *model.store_mut().grads_mut() = g;
            }
        }
        stats.ctc_nll += loss.ctc_nll;
        stats.att_nll += loss.att_nll;
        stats.mtl += loss.mtl;
        stats.trained += 1;
    }
    if stats.trained > 0 {
        let n = stats.trained as f64;
        stats.ctc_nll /= n;
        stats.att_nll /= n;
        stats.mtl /= n;
    }
    Ok(stats)
}

/// Per-token perplexity `exp(Σ nll / Σ (len + 1))`, eos included.
pub fn lm_perplexity(lm: &LanguageModel, transcripts: &[LabelSequence]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for t in transcripts {
        nll += lm.lm.sequence_nll(lm.store.params(), t, None)?;
        tokens += t.len() + 1;
    }
    Ok((nll / tokens.max(1) as f64).exp())
}

/// One shuffled AdaDelta pass of the LM over `transcripts`; returns the
/// training perplexity accumulated during the pass.
pub fn train_lm_epoch(
    lm: &mut LanguageModel,
    optimizer: &mut AdaDelta,
    transcripts: &[LabelSequence],
    clip_norm: f64,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for idx in epoch_order(transcripts.len(), seed, epoch) {
        let t = &transcripts[idx];
        lm.store.zero_grads();
        let (params, grads) = lm.store.split_mut();
        nll += lm.lm.sequence_nll(params, t, Some(grads))?;
        tokens += t.len() + 1;
        let mut g = std::mem::take(lm.store.grads_mut());
        clip_grad_norm(&mut [&mut g], clip_norm);
        optimizer.update(lm.store.params_mut(), &g);
        *lm.store.grads_mut() = g;
    }
    Ok((nll / tokens.max(1) as f64).exp())
}
