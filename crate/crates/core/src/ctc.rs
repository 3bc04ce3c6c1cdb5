//! CTC: forward-backward loss, full-sequence probability, and incremental
//! prefix probabilities for label-synchronous decoding.
//!
//! All dynamic programs run in the log domain; impossible states hold `-∞`.
//! The topology is the usual blank-interleaved one: a blank may separate any
//! two labels and must separate repeated labels.

use crate::error::{Error, Result};
use crate::nn::math::{log_add, log_softmax, log_sum_exp};
use crate::tensor::Tensor;
use crate::vocab::{Label, Vocab};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Framewise log-posteriors, `T' × (|U| + 1)`, blank in column 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    logp: Tensor,
}

impl PosteriorGrid {
    /// Normalizes each row of `logits` with a log-softmax.
    pub fn from_logits(logits: &Tensor) -> Self {
        let mut logp = Tensor::zeros(logits.dims());
        for t in 0..logits.rows() {
            logp.row_mut(t).copy_from_slice(&log_softmax(logits.row(t)));
        }
        Self { logp }
    }

    /// Wraps rows that are already log-distributions (checked to 1e-10).
    pub fn from_log_probs(logp: Tensor) -> Result<Self> {
        if logp.dims().len() != 2 {
            return Err(Error::Dimension {
                context: "posterior grid rank",
                expected: 2,
                actual: logp.dims().len(),
            });
        }
        for t in 0..logp.rows() {
            let z = log_sum_exp(logp.row(t));
            if (z).abs() > 1e-10 {
                return Err(Error::Config(format!("posterior row {t} has log-mass {z}, expected 0")));
            }
        }
        Ok(Self { logp })
    }

    /// Builds a grid from plain probabilities (rows must sum to one).
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let data = probs.data().iter().map(|p| p.ln()).collect();
        Self::from_log_probs(Tensor::from_vec(probs.dims(), data))
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    /// `|U| + 1`.
    pub fn width(&self) -> usize {
        self.logp.cols()
    }

    pub fn logp(&self, t: usize, label: Label) -> f64 {
        self.logp.row(t)[label.id()]
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.logp
    }

    fn check_labels(&self, labels: &[Label]) -> Result<()> {
        if self.frames() == 0 {
            return Err(Error::EmptyInput("posterior grid has no frames"));
        }
        match labels.iter().find(|l| l.id() == 0 || l.id() >= self.width()) {
            Some(l) => Err(Error::InvalidLabel {
                id: l.id(),
                context: "CTC target",
            }),
            None => Ok(()),
        }
    }
}

/// Result of [`ctc_loss`]. `grad` is `∂nll/∂logp`, the negated state occupancy.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub nll: f64,
    pub grad: Tensor,
    pub alignable: bool,
}

fn extended(labels: &[Label]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(0);
    for l in labels {
        ext.push(l.id());
        ext.push(0);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]
}

fn forward_table(grid: &PosteriorGrid, ext: &[usize]) -> Vec<Vec<f64>> {
    let t_len = grid.frames();
    let s_len = ext.len();
    let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
    let row0 = grid.logp.row(0);
    alpha[0][0] = row0[ext[0]];
    if s_len > 1 {
        alpha[0][1] = row0[ext[1]];
    }
    for t in 1..t_len {
        let row = grid.logp.row(t);
        let (prev, cur) = alpha.split_at_mut(t);
        let prev = &prev[t - 1];
        let cur = &mut cur[0];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + row[ext[s]];
        }
    }
    alpha
}

fn final_logprob(alpha_last: &[f64]) -> f64 {
    let s_len = alpha_last.len();
    if s_len == 1 {
        alpha_last[0]
    } else {
        log_add(alpha_last[s_len - 1], alpha_last[s_len - 2])
    }
}

/// `log p_ctc(labels | X)` by the forward algorithm. `-∞` when no alignment fits.
pub fn ctc_full_logprob(grid: &PosteriorGrid, labels: &[Label]) -> Result<f64> {
    grid.check_labels(labels)?;
    let ext = extended(labels);
    let alpha = forward_table(grid, &ext);
    Ok(final_logprob(&alpha[grid.frames() - 1]))
}

/// Negative log-likelihood of `target` and its gradient w.r.t. the grid,
/// via forward-backward. Unalignable targets give `nll = +∞`, a zero
/// gradient and `alignable = false`.
pub fn ctc_loss(grid: &PosteriorGrid, target: &[Label]) -> Result<CtcLoss> {
    grid.check_labels(target)?;
    let t_len = grid.frames();
    let ext = extended(target);
    let s_len = ext.len();
    let alpha = forward_table(grid, &ext);
    let logp = final_logprob(&alpha[t_len - 1]);
    let mut grad = Tensor::zeros(grid.logp.dims());
    if logp == NEG_INF {
        return Ok(CtcLoss {
            nll: f64::INFINITY,
            grad,
            alignable: false,
        });
    }

    let mut beta = vec![vec![NEG_INF; s_len]; t_len];
    let last = grid.logp.row(t_len - 1);
    beta[t_len - 1][s_len - 1] = last[ext[s_len - 1]];
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = last[ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        let row = grid.logp.row(t);
        let (cur, next) = beta.split_at_mut(t + 1);
        let next = &next[0];
        let cur = &mut cur[t];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = acc + row[ext[s]];
        }
    }

    let width = grid.width();
    let mut occupancy = vec![NEG_INF; width];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = NEG_INF);
        for s in 0..s_len {
            occupancy[ext[s]] = log_add(occupancy[ext[s]], alpha[t][s] + beta[t][s]);
        }
        let row = grid.logp.row(t);
        let g = grad.row_mut(t);
        for k in 0..width {
            if occupancy[k] != NEG_INF {
                g[k] = -(occupancy[k] - row[k] - logp).exp();
            }
        }
    }
    Ok(CtcLoss {
        nll: -logp,
        grad,
        alignable: true,
    })
}

/// Forward variables of one decoding prefix `g` over the encoder frames.
///
/// `log_gamma_n[t]` / `log_gamma_b[t]` hold the log-probability of emitting
/// exactly `g` in frames `0..=t` with the last frame non-blank / blank.
/// `prefix_logprob` is the log of the total probability of every label
/// sequence that starts with `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub log_gamma_n: Vec<f64>,
    pub log_gamma_b: Vec<f64>,
    pub prefix_logprob: f64,
}

/// Outcome of extending a prefix: a new open prefix, or (for eos) the
/// closed sequence's full log-probability.
#[derive(Clone, Debug, PartialEq)]
pub enum PrefixStep {
    Open(CtcPrefixState),
    Closed(f64),
}

impl PrefixStep {
    pub fn score(&self) -> f64 {
        match self {
            PrefixStep::Open(s) => s.prefix_logprob,
            PrefixStep::Closed(p) => *p,
        }
    }
}

impl CtcPrefixState {
    /// State of the empty prefix.
    pub fn initial(grid: &PosteriorGrid) -> Self {
        let t_len = grid.frames();
        let mut log_gamma_b = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += grid.logp(t, Label::BLANK);
            log_gamma_b.push(acc);
        }
        Self {
            log_gamma_n: vec![NEG_INF; t_len],
            log_gamma_b,
            prefix_logprob: 0.0,
        }
    }

    /// `log p_ctc(prefix | X)`, the probability that the sequence ends here.
    pub fn terminal_logprob(&self) -> f64 {
        match (self.log_gamma_n.last(), self.log_gamma_b.last()) {
            (Some(&n), Some(&b)) => log_add(n, b),
            _ => NEG_INF,
        }
    }

    /// State for `prefix · c`; `self` must be the state of `prefix`. O(T').
    pub fn extend(&self, grid: &PosteriorGrid, prefix: &[Label], c: Label) -> Result<Self> {
        if c.id() == 0 || c.id() >= grid.width() {
            return Err(Error::InvalidLabel {
                id: c.id(),
                context: "CTC prefix extension",
            });
        }
        let t_len = grid.frames();
        let repeat = prefix.last() == Some(&c);
        let mut gn = vec![NEG_INF; t_len];
        let mut gb = vec![NEG_INF; t_len];
        if prefix.is_empty() {
            gn[0] = grid.logp(0, c);
        }
        let mut psi = gn[0];
        for t in 1..t_len {
            let phi = if repeat {
                self.log_gamma_b[t - 1]
            } else {
                log_add(self.log_gamma_b[t - 1], self.log_gamma_n[t - 1])
            };
            let y_c = grid.logp(t, c);
            gn[t] = log_add(gn[t - 1], phi) + y_c;
            gb[t] = log_add(gb[t - 1], gn[t - 1]) + grid.logp(t, Label::BLANK);
            psi = log_add(psi, phi + y_c);
        }
        Ok(Self {
            log_gamma_n: gn,
            log_gamma_b: gb,
            prefix_logprob: psi,
        })
    }
}

/// Extends `prefix` by `c ∈ U ∪ {eos}`. Blank and sos are rejected.
pub fn prefix_extend(
    state: &CtcPrefixState,
    grid: &PosteriorGrid,
    vocab: &Vocab,
    prefix: &[Label],
    c: Label,
) -> Result<PrefixStep> {
    if c == vocab.eos() {
        Ok(PrefixStep::Closed(state.terminal_logprob()))
    } else if vocab.is_char(c) {
        Ok(PrefixStep::Open(state.extend(grid, prefix, c)?))
    } else {
        Err(Error::InvalidLabel {
            id: c.id(),
            context: "CTC prefix extension",
        })
    }
}

pub const ORACLE_MAX_FRAMES: usize = 8;
pub const ORACLE_MAX_CHARS: usize = 3;

/// Log of the summed full-sequence probability of every label sequence
/// (length ≤ T') that starts with `prefix`, by explicit enumeration.
/// Restricted to `T' ≤ 8`, `|U| ≤ 3`.
pub fn brute_force_prefix_oracle(grid: &PosteriorGrid, prefix: &[Label]) -> Result<f64> {
    grid.check_labels(prefix)?;
    let t_len = grid.frames();
    let n_chars = grid.width() - 1;
    if t_len > ORACLE_MAX_FRAMES || n_chars > ORACLE_MAX_CHARS {
        return Err(Error::TooLarge(format!(
            "prefix oracle limited to T' <= {ORACLE_MAX_FRAMES}, |U| <= {ORACLE_MAX_CHARS}; got T'={t_len}, |U|={n_chars}"
        )));
    }
    if prefix.len() > t_len {
        return Ok(NEG_INF);
    }
    let mut terms = Vec::new();
    let mut seq = prefix.to_vec();
    enumerate_suffixes(grid, n_chars, t_len, &mut seq, &mut terms)?;
    Ok(if terms.is_empty() { NEG_INF } else { log_sum_exp(&terms) })
}

fn enumerate_suffixes(
    grid: &PosteriorGrid,
    n_chars: usize,
    max_len: usize,
    seq: &mut Vec<Label>,
    out: &mut Vec<f64>,
) -> Result<()> {
    out.push(ctc_full_logprob(grid, seq)?);
    if seq.len() == max_len {
        return Ok(());
    }
    for c in 1..=n_chars as u32 {
        seq.push(Label(c));
        enumerate_suffixes(grid, n_chars, max_len, seq, out)?;
        seq.pop();
    }
    Ok(())
}
