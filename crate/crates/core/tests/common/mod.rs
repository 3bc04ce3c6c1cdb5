#![allow(dead_code)]

use e2ea_core::nn::log_sum_exp;
use e2ea_core::{Label, PosteriorGrid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut ChaCha8Rng, frames: usize, width: usize) -> PosteriorGrid {
    let logits = (0..frames * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PosteriorGrid::from_logits(&Tensor::from_vec(&[frames, width], logits))
}

pub fn random_labels(rng: &mut ChaCha8Rng, n_chars: u32, len: usize) -> Vec<Label> {
    (0..len).map(|_| Label(rng.gen_range(1..=n_chars))).collect()
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<Label> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != 0 {
            out.push(Label(k as u32));
        }
        prev = Some(k);
    }
    out
}

/// Calls `f(path, log p(path))` for every framewise path over the grid.
pub fn for_each_path(grid: &PosteriorGrid, mut f: impl FnMut(&[usize], f64)) {
    let (t_len, width) = (grid.frames(), grid.width());
    let mut path = vec![0usize; t_len];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| grid.log_probs().row(t)[k]).sum();
        f(&path, lp);
        let mut t = 0;
        loop {
            if t == t_len {
                return;
            }
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// `log p(labels | X)` by summing every path that collapses to `labels`.
pub fn enumerated_logprob(grid: &PosteriorGrid, labels: &[Label]) -> f64 {
    let mut terms = Vec::new();
    for_each_path(grid, |path, lp| {
        if collapse(path) == labels {
            terms.push(lp);
        }
    });
    if terms.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp(&terms)
    }
}

/// Log prefix probability: every path whose collapse starts with `prefix`.
pub fn enumerated_prefix_logprob(grid: &PosteriorGrid, prefix: &[Label]) -> f64 {
    let mut terms = Vec::new();
    for_each_path(grid, |path, lp| {
        if collapse(path).starts_with(prefix) {
            terms.push(lp);
        }
    });
    if terms.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp(&terms)
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a == f64::NEG_INFINITY && b == f64::NEG_INFINITY) || (a - b).abs() <= tol
}
