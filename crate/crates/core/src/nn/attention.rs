//! Location-aware content attention.
//!
//! For each encoder frame `t` the score is
//! `e_t = wᵀ tanh(W_q q + W_h h_t + W_f f_t + b)`, where `f_t` holds the
//! responses of `K` centered 1-D filters run over the previous attention
//! weights. `a = softmax(e)` and the context is `r = Σ_t a_t h_t`.

use crate::error::{check_dim, Error, Result};
use crate::nn::math::softmax;
use crate::params::{Gradients, ParamId, ParamStore, Params};
use crate::tensor::{add_assign, axpy, dot, matvec_acc, matvec_t_acc, outer_acc, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LocationAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_loc: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
    pub filters: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
    pub att_dim: usize,
    pub num_filters: usize,
    pub filter_width: usize,
}

/// Key projections `W_h h_t + b`, computed once per utterance.
#[derive(Clone, Debug)]
pub struct AttentionKeys {
    proj: Tensor,
}

impl AttentionKeys {
    pub fn len(&self) -> usize {
        self.proj.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.proj.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_prev: Vec<f64>,
    a_prev: Vec<f64>,
    loc: Tensor,
    hidden: Tensor,
    weights: Vec<f64>,
}

impl LocationAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        att_dim: usize,
        num_filters: usize,
        filter_width: usize,
    ) -> Result<Self> {
        if num_filters == 0 {
            return Err(Error::Config("attention needs at least one location filter".into()));
        }
        if filter_width % 2 == 0 {
            return Err(Error::Config(format!(
                "attention filter width must be odd to be centered, got {filter_width}"
            )));
        }
        Ok(Self {
            w_query: store.add(format!("{name}.w_query"), &[att_dim, query_dim]),
            w_key: store.add(format!("{name}.w_key"), &[att_dim, key_dim]),
            w_loc: store.add(format!("{name}.w_loc"), &[att_dim, num_filters]),
            bias: store.add(format!("{name}.bias"), &[att_dim]),
            score: store.add(format!("{name}.score"), &[att_dim]),
            filters: store.add(format!("{name}.filters"), &[num_filters, filter_width]),
            query_dim,
            key_dim,
            att_dim,
            num_filters,
            filter_width,
        })
    }

    pub fn prepare(&self, params: &Params, enc: &Tensor) -> Result<AttentionKeys> {
        if enc.rows() == 0 {
            return Err(Error::EmptyInput("attention over zero encoder frames"));
        }
        check_dim("attention key dim", self.key_dim, enc.cols())?;
        let mut proj = Tensor::zeros(&[enc.rows(), self.att_dim]);
        let bias = params.get(self.bias).data();
        for t in 0..enc.rows() {
            let row = proj.row_mut(t);
            row.copy_from_slice(bias);
            matvec_acc(params.get(self.w_key), enc.row(t), row);
        }
        Ok(AttentionKeys { proj })
    }

    /// Backward of [`prepare`](Self::prepare): folds key-projection gradients into
    /// the key weights, the bias, and the encoder output gradient.
    pub fn prepare_backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        enc: &Tensor,
        dkeys: &Tensor,
        denc: &mut Tensor,
    ) {
        for t in 0..enc.rows() {
            let dk = dkeys.row(t);
            outer_acc(grads.get_mut(self.w_key), dk, enc.row(t));
            add_assign(grads.get_mut(self.bias).data_mut(), dk);
            matvec_t_acc(params.get(self.w_key), dk, denc.row_mut(t));
        }
    }

    /// Uniform weights used before the first decoder step.
    pub fn initial_weights(len: usize) -> Vec<f64> {
        vec![1.0 / len as f64; len]
    }

    fn location_features(&self, params: &Params, a_prev: &[f64]) -> Tensor {
        let t_len = a_prev.len();
        let width = self.filter_width;
        let half = width / 2;
        let filters = params.get(self.filters);
        let mut loc = Tensor::zeros(&[t_len, self.num_filters]);
        for t in 0..t_len {
            let row = loc.row_mut(t);
            for (k, out) in row.iter_mut().enumerate() {
                let filt = filters.row(k);
                for (j, w) in filt.iter().enumerate() {
                    if let Some(src) = (t + j).checked_sub(half).filter(|&s| s < t_len) {
                        *out += w * a_prev[src];
                    }
                }
            }
        }
        loc
    }

    /// Returns attention weights `a` and the context vector `r`.
    pub fn step(
        &self,
        params: &Params,
        enc: &Tensor,
        keys: &AttentionKeys,
        q_prev: &[f64],
        a_prev: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, AttentionCache)> {
        let t_len = enc.rows();
        if t_len == 0 {
            return Err(Error::EmptyInput("attention over zero encoder frames"));
        }
        check_dim("attention query", self.query_dim, q_prev.len())?;
        check_dim("previous attention weights", t_len, a_prev.len())?;
        let mut query = vec![0.0; self.att_dim];
        matvec_acc(params.get(self.w_query), q_prev, &mut query);
        let loc = self.location_features(params, a_prev);
        let w_loc = params.get(self.w_loc);
        let score = params.get(self.score).data();
        let mut hidden = Tensor::zeros(&[t_len, self.att_dim]);
        let mut energies = vec![0.0; t_len];
        for t in 0..t_len {
            let z = hidden.row_mut(t);
            z.copy_from_slice(keys.proj.row(t));
            add_assign(z, &query);
            matvec_acc(w_loc, loc.row(t), z);
            z.iter_mut().for_each(|v| *v = v.tanh());
            energies[t] = dot(score, z);
        }
        let weights = softmax(&energies);
        let mut context = vec![0.0; enc.cols()];
        for (t, &a) in weights.iter().enumerate() {
            axpy(a, enc.row(t), &mut context);
        }
        let cache = AttentionCache {
            q_prev: q_prev.to_vec(),
            a_prev: a_prev.to_vec(),
            loc,
            hidden,
            weights: weights.clone(),
        };
        Ok((weights, context, cache))
    }

    /// Given `da` (gradient w.r.t. this step's weights) and `dr` (context),
    /// accumulates into parameter, key, and encoder gradients and returns
    /// `(dq_prev, da_prev)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        enc: &Tensor,
        cache: &AttentionCache,
        da: &[f64],
        dr: &[f64],
        dkeys: &mut Tensor,
        denc: &mut Tensor,
    ) -> (Vec<f64>, Vec<f64>) {
        let t_len = enc.rows();
        let a = &cache.weights;
        let mut da_total = da.to_vec();
        for t in 0..t_len {
            da_total[t] += dot(dr, enc.row(t));
            axpy(a[t], dr, denc.row_mut(t));
        }
        let mean: f64 = a.iter().zip(&da_total).map(|(x, y)| x * y).sum();
        let de: Vec<f64> = a.iter().zip(&da_total).map(|(x, y)| x * (y - mean)).collect();

        let score = params.get(self.score).data().to_vec();
        let w_loc = params.get(self.w_loc);
        let mut dquery = vec![0.0; self.att_dim];
        let mut dloc = Tensor::zeros(&[t_len, self.num_filters]);
        let mut dscore = vec![0.0; self.att_dim];
        let mut dz = vec![0.0; self.att_dim];
        for t in 0..t_len {
            let u = cache.hidden.row(t);
            axpy(de[t], u, &mut dscore);
            for j in 0..self.att_dim {
                dz[j] = de[t] * score[j] * (1.0 - u[j] * u[j]);
            }
            add_assign(&mut dquery, &dz);
            add_assign(dkeys.row_mut(t), &dz);
            outer_acc(grads.get_mut(self.w_loc), &dz, cache.loc.row(t));
            matvec_t_acc(w_loc, &dz, dloc.row_mut(t));
        }
        add_assign(grads.get_mut(self.score).data_mut(), &dscore);
        outer_acc(grads.get_mut(self.w_query), &dquery, &cache.q_prev);
        let mut dq = vec![0.0; self.query_dim];
        matvec_t_acc(params.get(self.w_query), &dquery, &mut dq);

        let half = self.filter_width / 2;
        let filters = params.get(self.filters);
        let mut da_prev = vec![0.0; t_len];
        let dfilters = grads.get_mut(self.filters);
        for t in 0..t_len {
            for k in 0..self.num_filters {
                let g = dloc.row(t)[k];
                if g == 0.0 {
                    continue;
                }
                for j in 0..self.filter_width {
                    if let Some(src) = (t + j).checked_sub(half).filter(|&s| s < t_len) {
                        dfilters.row_mut(k)[j] += g * cache.a_prev[src];
                        da_prev[src] += g * filters.row(k)[j];
                    }
                }
            }
        }
        (dq, da_prev)
    }
}
