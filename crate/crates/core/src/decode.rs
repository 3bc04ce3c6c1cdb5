//! Label-synchronous beam search over the attention decoder, optionally
//! scored jointly with CTC prefix probabilities, plus n-best rescoring and
//! an exhaustive reference search for small instances.
//!
//! Joint scores are `λ·log p_ctc + (1−λ)·α_att`. Both terms can only drop as
//! a hypothesis grows, which is what makes the end-detection rule exact.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::attdec::{fuse, DecoderState, FusionConfig, RnnLmState};
use crate::ctc::{ctc_full_logprob, prefix_extend, CtcPrefixState, PrefixStep};
use crate::error::{Error, Result};
use crate::model::{Encoded, LanguageModel, Model};
use crate::vocab::{Label, LabelSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Attention,
    Rescoring,
    OnePass,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Attention => "attention",
            DecodeMode::Rescoring => "rescoring",
            DecodeMode::OnePass => "one-pass",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(DecodeMode::Attention),
            "rescoring" => Ok(DecodeMode::Rescoring),
            "one-pass" => Ok(DecodeMode::OnePass),
            other => Err(Error::Config(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub lambda: f64,
    pub mode: DecodeMode,
    pub fusion: FusionConfig,
    /// Longest output as a fraction of the encoder length.
    pub max_len_ratio: f64,
    /// Size of the n-best list; defaults to the beam width.
    pub nbest: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            lambda: 0.5,
            mode: DecodeMode::OnePass,
            fusion: FusionConfig::none(),
            max_len_ratio: 1.0,
            nbest: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.max_len_ratio > 0.0 && self.max_len_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "max_len_ratio must be in (0, 1], got {}",
                self.max_len_ratio
            )));
        }
        if self.nbest == Some(0) {
            return Err(Error::Config("n-best size must be at least 1".into()));
        }
        self.fusion.validate()
    }

    fn nbest_size(&self) -> usize {
        self.nbest.unwrap_or(self.beam_width)
    }

    pub fn max_len(&self, frames: usize) -> usize {
        (self.max_len_ratio * frames as f64 + 1e-9).floor() as usize
    }
}

/// `λ·ctc + (1−λ)·att`, with the endpoints taken exactly so that a `-∞`
/// term weighted by zero never turns into NaN.
pub fn joint_score(lambda: f64, ctc: f64, att: f64) -> f64 {
    if lambda == 0.0 {
        att
    } else if lambda == 1.0 {
        ctc
    } else {
        lambda * ctc + (1.0 - lambda) * att
    }
}

/// A partial (or, once eos is emitted, complete) decoding hypothesis.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub prefix: LabelSequence,
    /// Sum of per-step fused log-probabilities.
    pub att_score: f64,
    pub ctc_state: Option<CtcPrefixState>,
    /// CTC prefix score, or the full-sequence score once finished.
    pub ctc_score: Option<f64>,
    pub lm_state: Option<RnnLmState>,
    pub dec_state: DecoderState,
    pub joint_score: f64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub labels: LabelSequence,
    pub att_score: f64,
    pub ctc_score: Option<f64>,
    pub joint_score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Hypotheses expanded by a decoder step.
    pub expanded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub best: LabelSequence,
    pub nbest: Vec<NBestEntry>,
    pub stats: DecodeStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub best: LabelSequence,
    pub score: f64,
    pub att_score: f64,
    pub ctc_score: f64,
}

pub const ORACLE_MAX_SEQUENCES: usize = 100_000;

fn rank(a: &NBestEntry, b: &NBestEntry) -> Ordering {
    b.joint_score
        .total_cmp(&a.joint_score)
        .then_with(|| a.labels.cmp(&b.labels))
}

struct Candidate {
    parent: usize,
    label: Label,
    att: f64,
    ctc: Option<PrefixStep>,
    joint: f64,
}

/// Decoding front-end over a trained model and an optional LM.
#[derive(Clone, Copy, Debug)]
pub struct Recognizer<'a> {
    pub model: &'a Model,
    pub lm: Option<&'a LanguageModel>,
}

impl<'a> Recognizer<'a> {
    pub fn new(model: &'a Model, lm: Option<&'a LanguageModel>) -> Self {
        Self { model, lm }
    }

    fn check_fusion(&self, fusion: &FusionConfig) -> Result<()> {
        if fusion.uses_lm() && self.lm.is_none() {
            return Err(Error::Config(format!("fusion mode `{}` needs a language model", fusion.mode)));
        }
        Ok(())
    }

    /// Runs the configured decoding mode.
    pub fn decode(&self, encoded: &Encoded, cfg: &BeamConfig) -> Result<DecodeResult> {
        match cfg.mode {
            DecodeMode::Attention => self.beam_search_attention(encoded, cfg),
            DecodeMode::Rescoring => {
                let att = self.beam_search_attention(encoded, cfg)?;
                self.rescore_with_ctc(encoded, att, cfg.lambda)
            }
            DecodeMode::OnePass => self.beam_search_one_pass(encoded, cfg),
        }
    }

    /// Attention-only beam search; the joint column equals `α_att`.
    pub fn beam_search_attention(&self, encoded: &Encoded, cfg: &BeamConfig) -> Result<DecodeResult> {
        self.search(encoded, cfg, None)
    }

    /// Beam search ranking every expansion by the joint CTC/attention score.
    /// With `λ = 0` the CTC term has no weight and is not computed.
    pub fn beam_search_one_pass(&self, encoded: &Encoded, cfg: &BeamConfig) -> Result<DecodeResult> {
        let ctc_lambda = (cfg.lambda != 0.0).then_some(cfg.lambda);
        self.search(encoded, cfg, ctc_lambda)
    }

    /// Recomputes each complete hypothesis' joint score with the CTC forward
    /// algorithm and re-sorts. Unalignable hypotheses sink to the bottom.
    pub fn rescore_with_ctc(&self, encoded: &Encoded, mut result: DecodeResult, lambda: f64) -> Result<DecodeResult> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
        }
        for e in &mut result.nbest {
            let ctc = ctc_full_logprob(&encoded.grid, &e.labels)?;
            e.ctc_score = Some(ctc);
            e.joint_score = joint_score(lambda, ctc, e.att_score);
        }
        result.nbest.sort_by(|a, b| b.joint_score.total_cmp(&a.joint_score));
        result.best = result.nbest.first().map(|e| e.labels.clone()).unwrap_or_default();
        Ok(result)
    }

    fn search(&self, encoded: &Encoded, cfg: &BeamConfig, ctc_lambda: Option<f64>) -> Result<DecodeResult> {
        cfg.validate()?;
        self.check_fusion(&cfg.fusion)?;
        let params = self.model.params();
        let decoder = self.model.decoder();
        let vocab = self.model.vocab();
        let eos = vocab.eos();
        let grid = &encoded.grid;
        let ctx = decoder.prepare(params, &encoded.enc.hidden)?;
        let lm = if cfg.fusion.uses_lm() { self.lm } else { None };
        let max_len = cfg.max_len(ctx.frames());
        let beam = cfg.beam_width;
        let nbest_size = cfg.nbest_size();

        let mut live = vec![Hypothesis {
            prefix: Vec::new(),
            att_score: 0.0,
            ctc_state: ctc_lambda.map(|_| CtcPrefixState::initial(grid)),
            ctc_score: ctc_lambda.map(|_| 0.0),
            lm_state: lm.map(|l| l.lm.initial_state()),
            dec_state: decoder.initial_state(&ctx),
            joint_score: 0.0,
            finished: false,
        }];
        let mut finished: Vec<NBestEntry> = Vec::new();
        let mut stats = DecodeStats::default();

        while !live.is_empty() {
            let mut candidates = Vec::new();
            let mut advanced = Vec::with_capacity(live.len());
            for (pi, hyp) in live.iter().enumerate() {
                let (logits, dec_next, _) = decoder.step(params, &ctx, &hyp.dec_state)?;
                let (lm_logits, lm_next) = match (lm, &hyp.lm_state) {
                    (Some(l), Some(s)) => {
                        let (z, next, _) = l.lm.step(l.store.params(), s, hyp.dec_state.prev)?;
                        (Some(z), Some(next))
                    }
                    _ => (None, None),
                };
                let logp = fuse(&logits, lm_logits.as_deref(), &cfg.fusion)?;
                stats.expanded += 1;
                let labels: Vec<Label> = if hyp.prefix.len() >= max_len {
                    vec![eos]
                } else {
                    vocab.chars().chain(std::iter::once(eos)).collect()
                };
                for c in labels {
                    let att = hyp.att_score + logp[vocab.out_index(c)?];
                    let (ctc, joint) = match (ctc_lambda, &hyp.ctc_state) {
                        (Some(lambda), Some(state)) => {
                            let step = prefix_extend(state, grid, vocab, &hyp.prefix, c)?;
                            let joint = joint_score(lambda, step.score(), att);
                            (Some(step), joint)
                        }
                        _ => (None, att),
                    };
                    candidates.push(Candidate {
                        parent: pi,
                        label: c,
                        att,
                        ctc,
                        joint,
                    });
                }
                advanced.push((dec_next, lm_next));
            }
            candidates.sort_by(|a, b| {
                b.joint
                    .total_cmp(&a.joint)
                    .then_with(|| a.label.cmp(&b.label))
                    .then_with(|| a.parent.cmp(&b.parent))
            });
            candidates.truncate(beam);

            let mut next_live = Vec::with_capacity(candidates.len());
            for cand in candidates {
                let parent = &live[cand.parent];
                let ctc_score = cand.ctc.as_ref().map(PrefixStep::score);
                if cand.label == eos {
                    finished.push(NBestEntry {
                        labels: parent.prefix.clone(),
                        att_score: cand.att,
                        ctc_score,
                        joint_score: cand.joint,
                    });
                    continue;
                }
                let (dec_next, lm_next) = &advanced[cand.parent];
                let mut dec_state = dec_next.clone();
                dec_state.prev = cand.label;
                let mut prefix = parent.prefix.clone();
                prefix.push(cand.label);
                let ctc_state = match cand.ctc {
                    Some(PrefixStep::Open(s)) => Some(s),
                    _ => None,
                };
                next_live.push(Hypothesis {
                    prefix,
                    att_score: cand.att,
                    ctc_state,
                    ctc_score,
                    lm_state: lm_next.clone(),
                    dec_state,
                    joint_score: cand.joint,
                    finished: false,
                });
            }
            live = next_live;

            if finished.len() >= nbest_size && !live.is_empty() {
                finished.sort_by(rank);
                let worst_kept = finished[nbest_size - 1].joint_score;
                let best_live = live.iter().map(|h| h.joint_score).fold(f64::NEG_INFINITY, f64::max);
                if best_live < worst_kept {
                    break;
                }
            }
        }

        finished.sort_by(rank);
        finished.truncate(nbest_size);
        Ok(DecodeResult {
            best: finished.first().map(|e| e.labels.clone()).unwrap_or_default(),
            nbest: finished,
            stats,
        })
    }

    /// Teacher-forced fused attention log-probability of `labels · eos`.
    pub fn attention_logprob(&self, encoded: &Encoded, labels: &[Label], fusion: &FusionConfig) -> Result<f64> {
        self.check_fusion(fusion)?;
        let lm = if fusion.uses_lm() { self.lm.map(LanguageModel::handle) } else { None };
        let tf = self
            .model
            .decoder()
            .teacher_forced(self.model.params(), &encoded.enc.hidden, labels, fusion, lm)?;
        Ok(-tf.nll)
    }

    /// Scores every sequence of length `≤ max_len` by the joint objective and
    /// returns the best; ties go to the lexicographically smaller sequence.
    pub fn exhaustive_oracle(
        &self,
        encoded: &Encoded,
        lambda: f64,
        max_len: usize,
        fusion: &FusionConfig,
    ) -> Result<OracleResult> {
        let n = self.model.vocab().size();
        let count = (0..=max_len as u32).try_fold(0usize, |acc, k| n.checked_pow(k).and_then(|p| acc.checked_add(p)));
        match count {
            Some(c) if (n + 1).checked_pow(max_len as u32).is_some_and(|b| b <= ORACLE_MAX_SEQUENCES) => {
                debug_assert!(c <= ORACLE_MAX_SEQUENCES);
            }
            _ => {
                return Err(Error::TooLarge(format!(
                    "|U ∪ {{eos}}|^{max_len} exceeds {ORACLE_MAX_SEQUENCES} sequences"
                )))
            }
        }
        let mut best: Option<OracleResult> = None;
        let mut seq = Vec::with_capacity(max_len);
        self.oracle_visit(encoded, lambda, max_len, fusion, &mut seq, &mut best)?;
        Ok(best.expect("the empty sequence is always scored"))
    }

    fn oracle_visit(
        &self,
        encoded: &Encoded,
        lambda: f64,
        max_len: usize,
        fusion: &FusionConfig,
        seq: &mut LabelSequence,
        best: &mut Option<OracleResult>,
    ) -> Result<()> {
        let att = self.attention_logprob(encoded, seq, fusion)?;
        let ctc = ctc_full_logprob(&encoded.grid, seq)?;
        let score = joint_score(lambda, ctc, att);
        if best.as_ref().is_none_or(|b| score > b.score) {
            *best = Some(OracleResult {
                best: seq.clone(),
                score,
                att_score: att,
                ctc_score: ctc,
            });
        }
        if seq.len() < max_len {
            for c in self.model.vocab().chars() {
                seq.push(c);
                self.oracle_visit(encoded, lambda, max_len, fusion, seq, best)?;
                seq.pop();
            }
        }
        Ok(())
    }
}
