//! 3×3 "same" convolution with ReLU and 3×3/stride-2 max pooling over
//! `channels × time × frequency` feature maps.

use crate::error::{check_dim, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore, Params};
use crate::tensor::Tensor;

const K: usize = 3;

/// Output length of a 3-wide, stride-2 pool with one cell of `-∞` padding: `ceil(n / 2)`.
pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dCache {
    input: Tensor,
    output: Tensor,
}

fn spatial(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [c, t, f] if t > 0 && f > 0 => Ok((c, t, f)),
        [_, _, _] => Err(Error::EmptyInput("feature map has an empty spatial axis")),
        _ => Err(Error::Dimension {
            context: "feature map rank",
            expected: 3,
            actual: x.dims().len(),
        }),
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[out_channels, in_channels, K, K]),
            bias: store.add(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
        }
    }

    /// Zero padding of one on both axes keeps `T × F`; ReLU is applied to the output.
    pub fn forward(&self, params: &Params, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let (c_in, t_len, f_len) = spatial(x)?;
        check_dim("conv2d input channels", self.in_channels, c_in)?;
        let w = params.get(self.weight).data();
        let b = params.get(self.bias).data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[self.out_channels, t_len, f_len]);
        let od = out.data_mut();
        for o in 0..self.out_channels {
            for t in 0..t_len {
                for f in 0..f_len {
                    let mut acc = b[o];
                    for i in 0..c_in {
                        let wbase = (o * c_in + i) * K * K;
                        for dt in 0..K {
                            let Some(tt) = (t + dt).checked_sub(1).filter(|&v| v < t_len) else {
                                continue;
                            };
                            for df in 0..K {
                                let Some(ff) = (f + df).checked_sub(1).filter(|&v| v < f_len) else {
                                    continue;
                                };
                                acc += w[wbase + dt * K + df] * xd[(i * t_len + tt) * f_len + ff];
                            }
                        }
                    }
                    od[(o * t_len + t) * f_len + f] = acc.max(0.0);
                }
            }
        }
        let cache = Conv2dCache {
            input: x.clone(),
            output: out.clone(),
        };
        Ok((out, cache))
    }

    pub fn backward(&self, params: &Params, grads: &mut Gradients, cache: &Conv2dCache, dy: &Tensor) -> Tensor {
        let (c_in, t_len, f_len) = (self.in_channels, cache.input.dims()[1], cache.input.dims()[2]);
        let w = params.get(self.weight).data();
        let xd = cache.input.data();
        let mut dx = Tensor::zeros(cache.input.dims());
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.out_channels];
        {
            let dxd = dx.data_mut();
            for o in 0..self.out_channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        let idx = (o * t_len + t) * f_len + f;
                        if cache.output.data()[idx] <= 0.0 {
                            continue;
                        }
                        let g = dy.data()[idx];
                        db[o] += g;
                        for i in 0..c_in {
                            let wbase = (o * c_in + i) * K * K;
                            for dt in 0..K {
                                let Some(tt) = (t + dt).checked_sub(1).filter(|&v| v < t_len) else {
                                    continue;
                                };
                                for df in 0..K {
                                    let Some(ff) = (f + df).checked_sub(1).filter(|&v| v < f_len) else {
                                        continue;
                                    };
                                    let xi = (i * t_len + tt) * f_len + ff;
                                    dw[wbase + dt * K + df] += g * xd[xi];
                                    dxd[xi] += g * w[wbase + dt * K + df];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in grads.get_mut(self.weight).data_mut().iter_mut().zip(&dw) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.bias).data_mut().iter_mut().zip(&db) {
            *a += b;
        }
        dx
    }
}

/// Records, for every pooled output cell, the flat input index that won the max.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_dims: Vec<usize>,
    argmax: Vec<usize>,
}

/// 3×3 window, stride 2, `-∞` padding of one: every output window holds at
/// least one real input, and each axis shrinks to `ceil(n / 2)`.
pub fn maxpool2d_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    let (c, t_len, f_len) = spatial(x)?;
    let (to, fo) = (pooled_len(t_len), pooled_len(f_len));
    let mut out = Tensor::zeros(&[c, to, fo]);
    let mut argmax = Vec::with_capacity(c * to * fo);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for t in 0..to {
            for f in 0..fo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for tt in (2 * t).saturating_sub(1)..(2 * t + 2).min(t_len) {
                    for ff in (2 * f).saturating_sub(1)..(2 * f + 2).min(f_len) {
                        let idx = (ch * t_len + tt) * f_len + ff;
                        if xd[idx] > best || best_idx == usize::MAX {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[(ch * to + t) * fo + f] = best;
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            input_dims: x.dims().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(&cache.input_dims);
    let dxd = dx.data_mut();
    for (&src, g) in cache.argmax.iter().zip(dy.data()) {
        dxd[src] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new(2);
        let conv = Conv2d::new(&mut store, "c", 2, 3);
        store.zero_params();
        let x = Tensor::from_vec(&[2, 4, 5], (0..40).map(|i| i as f64 - 20.0).collect());
        let (y, _) = conv.forward(store.params(), &x).unwrap();
        assert_eq!(y.dims(), &[3, 4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_is_identity_on_non_negative_input() {
        let mut store = ParamStore::new(2);
        let conv = Conv2d::new(&mut store, "c", 1, 1);
        store.zero_params();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        store.set("c.weight", w).unwrap();
        let x = Tensor::from_vec(&[1, 3, 4], (0..12).map(|i| i as f64 * 0.5).collect());
        let (y, _) = conv.forward(store.params(), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::new(2);
        let conv = Conv2d::new(&mut store, "c", 3, 2);
        let err = conv.forward(store.params(), &Tensor::zeros(&[2, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn pool_shapes() {
        let (y, _) = maxpool2d_forward(&Tensor::zeros(&[2, 8, 8])).unwrap();
        assert_eq!(y.dims(), &[2, 4, 4]);
        let (y, _) = maxpool2d_forward(&Tensor::zeros(&[1, 100, 40])).unwrap();
        assert_eq!(y.dims(), &[1, 50, 20]);
        let (y2, _) = maxpool2d_forward(&y).unwrap();
        assert_eq!(y2.dims(), &[1, 25, 10]);
        for n in 1..200 {
            assert_eq!(pooled_len(n), (n + 1) / 2);
            assert_eq!(pooled_len(pooled_len(n)), n.div_ceil(4));
        }
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = Tensor::from_vec(&[1, 5, 3], vec![-2.5; 15]);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn pool_window_is_centered() {
        let x = Tensor::from_vec(&[1, 1, 5], vec![1.0, 5.0, 2.0, 3.0, 9.0]);
        let (y, cache) = maxpool2d_forward(&x).unwrap();
        // windows: [0,1], [1,3], [3,4]
        assert_eq!(y.data(), &[5.0, 5.0, 9.0]);
        let dx = maxpool2d_backward(&cache, &Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0, 1.0]);
    }
}
