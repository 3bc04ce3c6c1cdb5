use crate::params::{Gradients, ParamId, ParamStore, Params};
use crate::tensor::{add_assign, matvec_acc, matvec_t_acc, outer_acc};

/// Affine map `y = W x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[out_dim, in_dim]),
            bias: store.add(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &Params, x: &[f64]) -> Vec<f64> {
        let mut y = params.get(self.bias).data().to_vec();
        matvec_acc(params.get(self.weight), x, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, params: &Params, grads: &mut Gradients, x: &[f64], dy: &[f64]) -> Vec<f64> {
        outer_acc(grads.get_mut(self.weight), dy, x);
        add_assign(grads.get_mut(self.bias).data_mut(), dy);
        let mut dx = vec![0.0; self.in_dim];
        matvec_t_acc(params.get(self.weight), dy, &mut dx);
        dx
    }
}

/// Label embedding: row `i` of a `vocab × dim` table, i.e. one-hot times a learned matrix.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), &[vocab, dim]),
            vocab,
            dim,
        }
    }

    pub fn forward<'a>(&self, params: &'a Params, index: usize) -> &'a [f64] {
        params.get(self.table).row(index)
    }

    pub fn backward(&self, grads: &mut Gradients, index: usize, dy: &[f64]) {
        add_assign(grads.get_mut(self.table).row_mut(index), dy);
    }
}
