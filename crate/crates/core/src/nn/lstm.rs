//! LSTM cell and bidirectional LSTM with backpropagation through time.
//!
//! Gate layout in the stacked pre-activation vector is `[i, f, g, o]`:
//! `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)` with sigmoid `i, f, o` and tanh `g`.

use crate::error::{check_dim, Error, Result};
use crate::nn::math::sigmoid;
use crate::params::{Gradients, ParamId, ParamStore, Params};
use crate::tensor::{add_assign, matvec_acc, matvec_t_acc, outer_acc, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_recurrent: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Values saved by [`LstmCell::step`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCache {
    pub fn input(&self) -> &[f64] {
        &self.x
    }
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize) -> Self {
        Self {
            w_input: store.add(format!("{name}.w_input"), &[4 * hidden_size, input_size]),
            w_recurrent: store.add(format!("{name}.w_recurrent"), &[4 * hidden_size, hidden_size]),
            bias: store.add(format!("{name}.bias"), &[4 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    pub fn zero_state(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.hidden_size], vec![0.0; self.hidden_size])
    }

    pub fn step(
        &self,
        params: &Params,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
        check_dim("lstm input", self.input_size, x.len())?;
        check_dim("lstm hidden state", self.hidden_size, h_prev.len())?;
        check_dim("lstm cell state", self.hidden_size, c_prev.len())?;
        let hs = self.hidden_size;
        let mut gates = params.get(self.bias).data().to_vec();
        matvec_acc(params.get(self.w_input), x, &mut gates);
        matvec_acc(params.get(self.w_recurrent), h_prev, &mut gates);
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if (2 * hs..3 * hs).contains(&k) {
                z.tanh()
            } else {
                sigmoid(*z)
            };
        }
        let mut c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        let mut tanh_c = vec![0.0; hs];
        for j in 0..hs {
            let (i, f, g, o) = (gates[j], gates[hs + j], gates[2 * hs + j], gates[3 * hs + j]);
            c[j] = f * c_prev[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Given gradients w.r.t. `h` and `c` of this step, accumulates parameter
    /// gradients and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden_size;
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for j in 0..hs {
            let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
            let tc = cache.tanh_c[j];
            let d_o = dh[j] * tc;
            let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            dz[j] = dct * gg * i * (1.0 - i);
            dz[hs + j] = dct * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * hs + j] = dct * i * (1.0 - gg * gg);
            dz[3 * hs + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dct * f;
        }
        outer_acc(grads.get_mut(self.w_input), &dz, &cache.x);
        outer_acc(grads.get_mut(self.w_recurrent), &dz, &cache.h_prev);
        add_assign(grads.get_mut(self.bias).data_mut(), &dz);
        let mut dx = vec![0.0; self.input_size];
        matvec_t_acc(params.get(self.w_input), &dz, &mut dx);
        let mut dh_prev = vec![0.0; hs];
        matvec_t_acc(params.get(self.w_recurrent), &dz, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }
}

/// Forward-in-time and backward-in-time LSTMs whose outputs are concatenated per frame.
#[derive(Clone, Copy, Debug)]
pub struct Blstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Clone, Debug)]
pub struct BlstmCache {
    forward: Vec<LstmCache>,
    backward: Vec<LstmCache>,
}

impl Blstm {
    pub fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_size, hidden_size),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_size, hidden_size),
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden_size
    }

    /// `x` is `T × D`; the result is `T × 2H` with the forward half first.
    pub fn forward(&self, params: &Params, x: &Tensor) -> Result<(Tensor, BlstmCache)> {
        let t_len = x.rows();
        if t_len == 0 {
            return Err(Error::EmptyInput("blstm input has no frames"));
        }
        let hs = self.forward.hidden_size;
        let mut out = Tensor::zeros(&[t_len, 2 * hs]);
        let mut fwd_cache = Vec::with_capacity(t_len);
        let (mut h, mut c) = self.forward.zero_state();
        for t in 0..t_len {
            let (h2, c2, cache) = self.forward.step(params, x.row(t), &h, &c)?;
            out.row_mut(t)[..hs].copy_from_slice(&h2);
            fwd_cache.push(cache);
            (h, c) = (h2, c2);
        }
        let mut bwd_cache = Vec::with_capacity(t_len);
        let (mut h, mut c) = self.backward.zero_state();
        for t in (0..t_len).rev() {
            let (h2, c2, cache) = self.backward.step(params, x.row(t), &h, &c)?;
            out.row_mut(t)[hs..].copy_from_slice(&h2);
            bwd_cache.push(cache);
            (h, c) = (h2, c2);
        }
        bwd_cache.reverse();
        Ok((
            out,
            BlstmCache {
                forward: fwd_cache,
                backward: bwd_cache,
            },
        ))
    }

    /// Backpropagation through time; returns `dx` (`T × D`).
    pub fn backward(&self, params: &Params, grads: &mut Gradients, cache: &BlstmCache, dy: &Tensor) -> Tensor {
        let t_len = cache.forward.len();
        let hs = self.forward.hidden_size;
        let mut dx = Tensor::zeros(&[t_len, self.forward.input_size]);
        let (mut dh, mut dc) = (vec![0.0; hs], vec![0.0; hs]);
        for t in (0..t_len).rev() {
            let mut dh_t = dh.clone();
            add_assign(&mut dh_t, &dy.row(t)[..hs]);
            let (dxt, dhp, dcp) = self.forward.backward(params, grads, &cache.forward[t], &dh_t, &dc);
            add_assign(dx.row_mut(t), &dxt);
            (dh, dc) = (dhp, dcp);
        }
        let (mut dh, mut dc) = (vec![0.0; hs], vec![0.0; hs]);
        for t in 0..t_len {
            let mut dh_t = dh.clone();
            add_assign(&mut dh_t, &dy.row(t)[hs..]);
            let (dxt, dhp, dcp) = self.backward.backward(params, grads, &cache.backward[t], &dh_t, &dc);
            add_assign(dx.row_mut(t), &dxt);
            (dh, dc) = (dhp, dcp);
        }
        dx
    }
}
