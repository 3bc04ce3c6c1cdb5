//! Shared acoustic encoder: an optional VGG-style convolutional front-end
//! followed by projected BLSTM layers, some of which read only every second
//! frame of the layer below. Both variants shorten `T` frames to `ceil(T / 4)`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::nn::conv::{maxpool2d_backward, maxpool2d_forward, pooled_len, Conv2d, Conv2dCache, MaxPoolCache};
use crate::nn::linear::Linear;
use crate::nn::lstm::{Blstm, BlstmCache};
use crate::params::{Gradients, ParamStore, Params};
use crate::tensor::{add_assign, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    Blstm,
    VggBlstm,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Blstm => "blstm",
            EncoderVariant::VggBlstm => "vgg-blstm",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blstm" => Ok(EncoderVariant::Blstm),
            "vgg-blstm" => Ok(EncoderVariant::VggBlstm),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Feature dimension `D` of the input frames.
    pub input_dim: usize,
    pub num_layers: usize,
    /// LSTM cells per direction.
    pub hidden: usize,
    /// Output size of the linear projection after each BLSTM layer.
    pub proj: usize,
    /// Layers that read every second frame of the layer below (index 0 reads the input).
    pub subsample: BTreeSet<usize>,
    /// Output channels of the two convolution blocks.
    pub vgg_channels: (usize, usize),
}

impl EncoderConfig {
    /// Four 320-cell BLSTM layers; the 2nd and 3rd read every second frame.
    pub fn blstm(input_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::Blstm,
            input_dim,
            num_layers: 4,
            hidden: 320,
            proj: 320,
            subsample: [1, 2].into_iter().collect(),
            vgg_channels: (64, 128),
        }
    }

    /// 64/128-channel convolution blocks, then non-subsampling BLSTM layers.
    pub fn vgg_blstm(input_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::VggBlstm,
            subsample: BTreeSet::new(),
            ..Self::blstm(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.num_layers == 0 || self.hidden == 0 || self.proj == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if let Some(&i) = self.subsample.iter().find(|&&i| i >= self.num_layers) {
            return bad(format!("subsample layer {i} out of range for {} layers", self.num_layers));
        }
        match self.variant {
            EncoderVariant::Blstm if self.subsample.len() != 2 => bad(format!(
                "blstm encoder needs exactly two subsampling layers (factor 4), got {:?}",
                self.subsample
            )),
            EncoderVariant::VggBlstm if !self.subsample.is_empty() => {
                bad("vgg-blstm encoder already downsamples by 4; subsample set must be empty".into())
            }
            EncoderVariant::VggBlstm if self.vgg_channels.0 == 0 || self.vgg_channels.1 == 0 => {
                bad("vgg channel counts must be positive".into())
            }
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.proj
    }

    /// Per-frame feature size entering the first BLSTM layer.
    pub fn blstm_input_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Blstm => self.input_dim,
            EncoderVariant::VggBlstm => self.vgg_channels.1 * pooled_len(pooled_len(self.input_dim)),
        }
    }
}

/// Acoustic features: static frames, plus static/Δ/ΔΔ channels when present.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub channels: Option<Tensor>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.dims().len() != 2 {
            return Err(Error::Dimension {
                context: "feature rank",
                expected: 2,
                actual: frames.dims().len(),
            });
        }
        if frames.rows() == 0 {
            return Err(Error::EmptyInput("feature sequence has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::Config("feature sequence contains non-finite values".into()));
        }
        Ok(Self { frames, channels: None })
    }

    /// Adds the 3-channel static/Δ/ΔΔ view.
    pub fn with_deltas(frames: Tensor) -> Result<Self> {
        let mut seq = Self::new(frames)?;
        seq.channels = Some(compute_deltas(&seq.frames));
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `T' × E` hidden vectors.
    pub hidden: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }
}

const DELTA_WINDOW: usize = 2;

fn delta(x: &Tensor) -> Tensor {
    let (t_len, d) = (x.rows(), x.cols());
    let norm: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, t_len as isize - 1) as usize;
    let mut out = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        let row = out.row_mut(t);
        for n in 1..=DELTA_WINDOW {
            let ahead = x.row(clamp(t as isize + n as isize));
            let behind = x.row(clamp(t as isize - n as isize));
            for j in 0..d {
                row[j] += n as f64 * (ahead[j] - behind[j]);
            }
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Regression deltas (window 2, edge frames replicated) and delta-deltas,
/// stacked as a `3 × T × D` tensor.
pub fn compute_deltas(x: &Tensor) -> Tensor {
    let d1 = delta(x);
    let d2 = delta(&d1);
    let mut data = Vec::with_capacity(3 * x.len());
    data.extend_from_slice(x.data());
    data.extend_from_slice(d1.data());
    data.extend_from_slice(d2.data());
    Tensor::from_vec(&[3, x.rows(), x.cols()], data)
}

/// Rescales the time axis by linear interpolation: output frame `i` samples
/// the input at position `i · factor`, giving `max(1, floor(T / factor))` frames.
pub fn speed_perturb(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("speed factor must be positive, got {factor}")));
    }
    let t_len = x.rows();
    if t_len == 0 {
        return Err(Error::EmptyInput("speed perturbation of empty sequence"));
    }
    // The small slack keeps exact ratios such as 90 / 0.9 from flooring to 99.
    let out_len = ((t_len as f64 / factor + 1e-9).floor() as usize).max(1);
    let d = x.cols();
    let mut out = Tensor::zeros(&[out_len, d]);
    let last = (t_len - 1) as f64;
    for i in 0..out_len {
        let pos = (i as f64 * factor).min(last);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_len - 1);
        let w = pos - lo as f64;
        let row = out.row_mut(i);
        for j in 0..d {
            row[j] = (1.0 - w) * x.row(lo)[j] + w * x.row(hi)[j];
        }
    }
    Ok(out)
}

fn take_every_second(x: &Tensor) -> Tensor {
    let keep = x.rows().div_ceil(2);
    let mut out = Tensor::zeros(&[keep, x.cols()]);
    for i in 0..keep {
        out.row_mut(i).copy_from_slice(x.row(2 * i));
    }
    out
}

fn scatter_every_second(dy: &Tensor, full_len: usize) -> Tensor {
    let mut dx = Tensor::zeros(&[full_len, dy.cols()]);
    for i in 0..dy.rows() {
        dx.row_mut(2 * i).copy_from_slice(dy.row(i));
    }
    dx
}

#[derive(Clone, Debug)]
struct VggFrontEnd {
    convs: [Conv2d; 4],
}

#[derive(Clone, Debug)]
struct VggCache {
    convs: Vec<Conv2dCache>,
    pools: Vec<MaxPoolCache>,
    pooled_dims: Vec<usize>,
}

impl VggFrontEnd {
    fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Self {
        let (c1, c2) = cfg.vgg_channels;
        Self {
            convs: [
                Conv2d::new(store, "enc.vgg.conv1_1", 3, c1),
                Conv2d::new(store, "enc.vgg.conv1_2", c1, c1),
                Conv2d::new(store, "enc.vgg.conv2_1", c1, c2),
                Conv2d::new(store, "enc.vgg.conv2_2", c2, c2),
            ],
        }
    }

    /// `3 × T × D` → `T/4 × (C · D/4)`, flattening channels and frequency per frame.
    fn forward(&self, params: &Params, x: &Tensor) -> Result<(Tensor, VggCache)> {
        let mut convs = Vec::with_capacity(4);
        let mut pools = Vec::with_capacity(2);
        let mut h = x.clone();
        for block in 0..2 {
            for conv in &self.convs[2 * block..2 * block + 2] {
                let (y, cache) = conv.forward(params, &h)?;
                convs.push(cache);
                h = y;
            }
            let (y, cache) = maxpool2d_forward(&h)?;
            pools.push(cache);
            h = y;
        }
        let (c, t_len, f_len) = (h.dims()[0], h.dims()[1], h.dims()[2]);
        let mut flat = Tensor::zeros(&[t_len, c * f_len]);
        for ch in 0..c {
            for t in 0..t_len {
                for f in 0..f_len {
                    flat.row_mut(t)[ch * f_len + f] = h.data()[(ch * t_len + t) * f_len + f];
                }
            }
        }
        Ok((
            flat,
            VggCache {
                convs,
                pools,
                pooled_dims: vec![c, t_len, f_len],
            },
        ))
    }

    fn backward(&self, params: &Params, grads: &mut Gradients, cache: &VggCache, dflat: &Tensor) {
        let (c, t_len, f_len) = (cache.pooled_dims[0], cache.pooled_dims[1], cache.pooled_dims[2]);
        let mut dh = Tensor::zeros(&cache.pooled_dims);
        for ch in 0..c {
            for t in 0..t_len {
                for f in 0..f_len {
                    dh.data_mut()[(ch * t_len + t) * f_len + f] = dflat.row(t)[ch * f_len + f];
                }
            }
        }
        for block in (0..2).rev() {
            dh = maxpool2d_backward(&cache.pools[block], &dh);
            for i in (2 * block..2 * block + 2).rev() {
                dh = self.convs[i].backward(params, grads, &cache.convs[i], &dh);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    blstm: Blstm,
    proj: Linear,
    subsample: bool,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input_len: usize,
    blstm: BlstmCache,
    blstm_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    vgg: Option<VggCache>,
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    vgg: Option<VggFrontEnd>,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let vgg = match config.variant {
            EncoderVariant::VggBlstm => Some(VggFrontEnd::new(store, &config)),
            EncoderVariant::Blstm => None,
        };
        let mut in_dim = config.blstm_input_dim();
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let blstm = Blstm::new(store, &format!("enc.blstm{i}"), in_dim, config.hidden);
            let proj = Linear::new(store, &format!("enc.proj{i}"), 2 * config.hidden, config.proj);
            layers.push(EncoderLayer {
                blstm,
                proj,
                subsample: config.subsample.contains(&i),
            });
            in_dim = config.proj;
        }
        Ok(Self { config, vgg, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn input_tensor<'a>(&self, x: &'a FeatureSequence) -> Result<&'a Tensor> {
        if x.is_empty() {
            return Err(Error::EmptyInput("feature sequence has no frames"));
        }
        check_dim("encoder input dim", self.config.input_dim, x.dim())?;
        match self.config.variant {
            EncoderVariant::Blstm => Ok(&x.frames),
            EncoderVariant::VggBlstm => match &x.channels {
                Some(c) if c.dims().first() == Some(&3) => Ok(c),
                Some(c) => Err(Error::Dimension {
                    context: "vgg input channels",
                    expected: 3,
                    actual: c.dims()[0],
                }),
                None => Err(Error::Dimension {
                    context: "vgg input channels",
                    expected: 3,
                    actual: 1,
                }),
            },
        }
    }

    pub fn encode(&self, params: &Params, x: &FeatureSequence) -> Result<EncoderOutput> {
        Ok(self.forward(params, x)?.0)
    }

    pub fn forward(&self, params: &Params, x: &FeatureSequence) -> Result<(EncoderOutput, EncoderCache)> {
        let input = self.input_tensor(x)?;
        let (mut h, vgg_cache) = match &self.vgg {
            Some(vgg) => {
                let (h, c) = vgg.forward(params, input)?;
                (h, Some(c))
            }
            None => (input.clone(), None),
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input_len = h.rows();
            if layer.subsample {
                h = take_every_second(&h);
            }
            let (y, blstm_cache) = layer.blstm.forward(params, &h)?;
            let mut out = Tensor::zeros(&[y.rows(), layer.proj.out_dim]);
            for t in 0..y.rows() {
                out.row_mut(t).copy_from_slice(&layer.proj.forward(params, y.row(t)));
            }
            caches.push(LayerCache {
                input_len,
                blstm: blstm_cache,
                blstm_out: y,
            });
            h = out;
        }
        Ok((
            EncoderOutput { hidden: h },
            EncoderCache {
                vgg: vgg_cache,
                layers: caches,
            },
        ))
    }

    /// Accumulates parameter gradients given `∂loss/∂hidden`.
    pub fn backward(&self, params: &Params, grads: &mut Gradients, cache: &EncoderCache, dhidden: &Tensor) {
        let mut dh = dhidden.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let mut dy = Tensor::zeros(lc.blstm_out.dims());
            for t in 0..dh.rows() {
                let dx = layer.proj.backward(params, grads, lc.blstm_out.row(t), dh.row(t));
                add_assign(dy.row_mut(t), &dx);
            }
            let dx = layer.blstm.backward(params, grads, &lc.blstm, &dy);
            dh = if layer.subsample {
                scatter_every_second(&dx, lc.input_len)
            } else {
                dx
            };
        }
        if let (Some(vgg), Some(vc)) = (&self.vgg, &cache.vgg) {
            vgg.backward(params, grads, vc, &dh);
        }
    }
}
