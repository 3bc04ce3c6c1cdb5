//! Named finite-difference checks over every differentiable component, on
//! tiny seeded instances.
//!
//! Weight matrices are redrawn uniformly with a fan-in scaled range (gain
//! 1.5) so that gradients neither vanish through the stacks nor saturate;
//! each check returns the largest relative error over parameters and, where
//! the component exposes them, inputs.
//!
//! Coordinates whose true gradient is below roughly `1e-7` sit at the
//! rounding floor of central differences with `ε = 1e-5`, so the deep
//! composite checks (`COMPOSITES`) are only meaningful on instances without
//! such coordinates; they are run at pinned seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attdec::{AttentionDecoder, DecoderConfig, FusionConfig, LmHandle, RnnLm};
use crate::ctc::{ctc_loss, PosteriorGrid};
use crate::encoder::{Encoder, EncoderConfig, EncoderVariant, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{
    check_against_gradients, check_param_store, finite_diff_check, DEFAULT_EPS, DEFAULT_TOLERANCE,
};
use crate::nn::math::{log_softmax, log_softmax_backward};
use crate::nn::{maxpool2d_backward, maxpool2d_forward, Blstm, Conv2d, LocationAttention, LstmCell};
use crate::nn::Linear;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{dot, Tensor};
use crate::train::mtl_loss;
use crate::vocab::{Label, Vocab};

pub const COMPONENTS: &[&str] = &[
    "linear",
    "lstm",
    "blstm",
    "conv2d",
    "maxpool",
    "attention",
    "encoder.blstm",
    "encoder.vgg-blstm",
    "ctc",
    "attention-nll",
    "lm-nll",
    "fused-lm.separate",
    "fused-lm.joint",
    "mtl",
];

/// Whole-network checks whose instances can contain near-zero gradient
/// coordinates; the rest are per-layer checks that hold for any seed.
pub const COMPOSITES: &[&str] = &["encoder.vgg-blstm", "fused-lm.separate", "mtl"];

pub const DEFAULT_SEED: u64 = 0;

const GAIN: f64 = 1.5;
const BIAS_RANGE: f64 = 0.5;
const CORRUPTION: f64 = 1.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Component whose analytic gradient is deliberately scaled by 1.01.
    pub corrupt: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when the check could not produce an error figure.
    pub failure: Option<String>,
}

/// Runs every component check; fails only on an unknown corruption target
/// or an invalid step size.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<GradCheckReport>> {
    if let Some(c) = &cfg.corrupt {
        if !COMPONENTS.contains(&c.as_str()) {
            return Err(Error::Config(format!("unknown gradient-check component `{c}`")));
        }
    }
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for &name in COMPONENTS {
        let corrupt = cfg.corrupt.as_deref() == Some(name);
        let report = match run_component(name, cfg.seed, cfg.eps, corrupt) {
            Ok(err) => GradCheckReport {
                component: name.to_string(),
                max_rel_error: err,
                passed: err < cfg.tolerance,
                failure: None,
            },
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => GradCheckReport {
                component: name.to_string(),
                max_rel_error: f64::NAN,
                passed: false,
                failure: Some(e.to_string()),
            },
        };
        out.push(report);
    }
    Ok(out)
}

/// Maximum relative error of one named check.
pub fn run_component(name: &str, seed: u64, eps: f64, corrupt: bool) -> Result<f64> {
    let mut ctx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        eps,
        corrupt,
    };
    match name {
        "linear" => ctx.linear(),
        "lstm" => ctx.lstm(),
        "blstm" => ctx.blstm(),
        "conv2d" => ctx.conv2d(),
        "maxpool" => ctx.maxpool(),
        "attention" => ctx.attention(),
        "encoder.blstm" => ctx.encoder(EncoderVariant::Blstm),
        "encoder.vgg-blstm" => ctx.encoder(EncoderVariant::VggBlstm),
        "ctc" => ctx.ctc(),
        "attention-nll" => ctx.attention_nll(),
        "lm-nll" => ctx.lm_nll(),
        "fused-lm.separate" => ctx.fused(FusionConfig::separate(0.3)),
        "fused-lm.joint" => ctx.fused(FusionConfig::joint()),
        "mtl" => ctx.mtl(),
        other => Err(Error::Config(format!("unknown gradient-check component `{other}`"))),
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    seed: u64,
    eps: f64,
    corrupt: bool,
}

fn labels(ids: &[u32]) -> Vec<Label> {
    ids.iter().map(|&i| Label(i)).collect()
}

fn weighted_sum(w: &Tensor, y: &Tensor) -> f64 {
    dot(w.data(), y.data())
}

impl Ctx {
    fn store(&mut self) -> ParamStore {
        ParamStore::new(self.seed)
    }

    fn randomize(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.params().ids().collect();
        for id in ids {
            let t = store.params_mut().get_mut(id);
            let fan_in: usize = t.dims().iter().skip(1).product();
            let range = if t.dims().len() > 1 {
                GAIN * (3.0 / fan_in as f64).sqrt()
            } else {
                BIAS_RANGE
            };
            for v in t.data_mut() {
                *v = self.rng.gen_range(-range..range);
            }
        }
    }

    fn tensor(&mut self, dims: &[usize], range: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| self.rng.gen_range(-range..range)).collect())
    }

    fn spoil(&self, grads: Option<&mut Gradients>) {
        if let (true, Some(g)) = (self.corrupt, grads) {
            g.scale(CORRUPTION);
        }
    }

    fn spoil_vec(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.corrupt {
            v.iter_mut().for_each(|x| *x *= CORRUPTION);
        }
        v
    }

    fn linear(&mut self) -> Result<f64> {
        let mut store = self.store();
        let lin = Linear::new(&mut store, "lin", 3, 4);
        self.randomize(&mut store);
        let x = self.tensor(&[3], 1.0).into_data();
        let k = 2;
        let nll = |lin: &Linear, p: &_, x: &[f64]| -log_softmax(&lin.forward(p, x))[k];
        let mut dx = Vec::new();
        let p_err = check_param_store("linear", &mut store, self.eps, |p, g| {
            let lp = log_softmax(&lin.forward(p, &x));
            if let Some(g) = g {
                let mut d = vec![0.0; 4];
                d[k] = -1.0;
                dx = lin.backward(p, g, &x, &log_softmax_backward(&lp, &d));
                self.spoil(Some(g));
            }
            -lp[k]
        })?;
        let params = store.params();
        let x_err = finite_diff_check("linear", |x| nll(&lin, params, x), &x, &self.spoil_vec(dx), self.eps)?;
        Ok(p_err.max(x_err))
    }

    fn lstm(&mut self) -> Result<f64> {
        let (d, h) = (3, 2);
        let mut store = self.store();
        let cell = LstmCell::new(&mut store, "lstm", d, h);
        self.randomize(&mut store);
        let xs = self.tensor(&[2, d], 1.0);
        let h0 = self.tensor(&[h], 0.5).into_data();
        let c0 = self.tensor(&[h], 0.5).into_data();
        let wh = self.tensor(&[h], 1.0).into_data();
        let wc = self.tensor(&[h], 1.0).into_data();
        let run = |p: &_, xs: &[f64]| {
            let (h1, c1, k1) = cell.step(p, &xs[..d], &h0, &c0).expect("lstm step on valid shapes");
            let (h2, c2, k2) = cell.step(p, &xs[d..], &h1, &c1).expect("lstm step on valid shapes");
            (dot(&wh, &h2) + dot(&wc, &c2), k1, k2)
        };
        let mut dxs = vec![0.0; 2 * d];
        let p_err = check_param_store("lstm", &mut store, self.eps, |p, g| {
            let (loss, k1, k2) = run(p, xs.data());
            if let Some(g) = g {
                let (dx2, dh1, dc1) = cell.backward(p, g, &k2, &wh, &wc);
                let (dx1, _, _) = cell.backward(p, g, &k1, &dh1, &dc1);
                dxs[..d].copy_from_slice(&dx1);
                dxs[d..].copy_from_slice(&dx2);
                self.spoil(Some(g));
            }
            loss
        })?;
        let params = store.params();
        let x_err = finite_diff_check("lstm", |x| run(params, x).0, xs.data(), &self.spoil_vec(dxs), self.eps)?;
        Ok(p_err.max(x_err))
    }

    fn blstm(&mut self) -> Result<f64> {
        let (t, d, h) = (3, 2, 2);
        let mut store = self.store();
        let net = Blstm::new(&mut store, "blstm", d, h);
        self.randomize(&mut store);
        let x = self.tensor(&[t, d], 1.0);
        let w = self.tensor(&[t, 2 * h], 1.0);
        let mut dx = Vec::new();
        let p_err = check_param_store("blstm", &mut store, self.eps, |p, g| {
            let (y, cache) = net.forward(p, &x).expect("blstm forward on valid shapes");
            if let Some(g) = g {
                dx = net.backward(p, g, &cache, &w).into_data();
                self.spoil(Some(g));
            }
            weighted_sum(&w, &y)
        })?;
        let params = store.params();
        let x_err = finite_diff_check(
            "blstm",
            |v| {
                let xt = Tensor::from_vec(&[t, d], v.to_vec());
                weighted_sum(&w, &net.forward(params, &xt).expect("blstm forward").0)
            },
            x.data(),
            &self.spoil_vec(dx),
            self.eps,
        )?;
        Ok(p_err.max(x_err))
    }

    fn conv2d(&mut self) -> Result<f64> {
        let dims = [2, 4, 4];
        let mut store = self.store();
        let conv = Conv2d::new(&mut store, "conv", 2, 3);
        self.randomize(&mut store);
        let x = self.tensor(&dims, 1.0);
        let w = self.tensor(&[3, 4, 4], 1.0);
        let mut dx = Vec::new();
        let p_err = check_param_store("conv2d", &mut store, self.eps, |p, g| {
            let (y, cache) = conv.forward(p, &x).expect("conv forward on valid shapes");
            if let Some(g) = g {
                dx = conv.backward(p, g, &cache, &w).into_data();
                self.spoil(Some(g));
            }
            weighted_sum(&w, &y)
        })?;
        let params = store.params();
        let x_err = finite_diff_check(
            "conv2d",
            |v| {
                let xt = Tensor::from_vec(&dims, v.to_vec());
                weighted_sum(&w, &conv.forward(params, &xt).expect("conv forward").0)
            },
            x.data(),
            &self.spoil_vec(dx),
            self.eps,
        )?;
        Ok(p_err.max(x_err))
    }

    fn maxpool(&mut self) -> Result<f64> {
        let dims = [2, 5, 5];
        let x = self.tensor(&dims, 1.0);
        let (y, cache) = maxpool2d_forward(&x)?;
        let w = self.tensor(y.dims(), 1.0);
        let dx = maxpool2d_backward(&cache, &w).into_data();
        finite_diff_check(
            "maxpool",
            |v| {
                let xt = Tensor::from_vec(&dims, v.to_vec());
                weighted_sum(&w, &maxpool2d_forward(&xt).expect("pool forward").0)
            },
            x.data(),
            &self.spoil_vec(dx),
            self.eps,
        )
    }

    fn attention(&mut self) -> Result<f64> {
        let (t, e, q, a_dim) = (5, 3, 2, 4);
        let mut store = self.store();
        let att = LocationAttention::new(&mut store, "att", q, e, a_dim, 2, 3)?;
        self.randomize(&mut store);
        let enc = self.tensor(&[t, e], 1.0);
        let q0 = self.tensor(&[q], 1.0).into_data();
        let q1 = self.tensor(&[q], 1.0).into_data();
        let wa = self.tensor(&[t], 1.0).into_data();
        let wr1 = self.tensor(&[e], 1.0).into_data();
        let wr2 = self.tensor(&[e], 1.0).into_data();
        let loss_of = |p: &_, enc: &Tensor| -> (f64, _, _, _) {
            let keys = att.prepare(p, enc).expect("attention keys");
            let (a1, r1, c1) = att
                .step(p, enc, &keys, &q0, &LocationAttention::initial_weights(t))
                .expect("attention step");
            let (a2, r2, c2) = att.step(p, enc, &keys, &q1, &a1).expect("attention step");
            (dot(&wa, &a2) + dot(&wr1, &r1) + dot(&wr2, &r2), keys, c1, c2)
        };
        let mut denc_out = Vec::new();
        let p_err = check_param_store("attention", &mut store, self.eps, |p, g| {
            let (loss, _, c1, c2) = loss_of(p, &enc);
            if let Some(g) = g {
                let mut dkeys = Tensor::zeros(&[t, a_dim]);
                let mut denc = Tensor::zeros(&[t, e]);
                let (_, da1) = att.backward(p, g, &enc, &c2, &wa, &wr2, &mut dkeys, &mut denc);
                att.backward(p, g, &enc, &c1, &da1, &wr1, &mut dkeys, &mut denc);
                att.prepare_backward(p, g, &enc, &dkeys, &mut denc);
                denc_out = denc.into_data();
                self.spoil(Some(g));
            }
            loss
        })?;
        let params = store.params();
        let e_err = finite_diff_check(
            "attention",
            |v| loss_of(params, &Tensor::from_vec(&[t, e], v.to_vec())).0,
            enc.data(),
            &self.spoil_vec(denc_out),
            self.eps,
        )?;
        Ok(p_err.max(e_err))
    }

    fn encoder(&mut self, variant: EncoderVariant) -> Result<f64> {
        let (cfg, t) = match variant {
            EncoderVariant::Blstm => (
                EncoderConfig {
                    input_dim: 2,
                    num_layers: 3,
                    hidden: 2,
                    proj: 2,
                    ..EncoderConfig::blstm(2)
                },
                9,
            ),
            EncoderVariant::VggBlstm => (
                EncoderConfig {
                    input_dim: 4,
                    num_layers: 1,
                    hidden: 2,
                    proj: 2,
                    vgg_channels: (2, 2),
                    ..EncoderConfig::vgg_blstm(4)
                },
                6,
            ),
        };
        let name = match variant {
            EncoderVariant::Blstm => "encoder.blstm",
            EncoderVariant::VggBlstm => "encoder.vgg-blstm",
        };
        let mut store = self.store();
        let enc = Encoder::new(&mut store, cfg.clone())?;
        self.randomize(&mut store);
        let frames = self.tensor(&[t, cfg.input_dim], 1.0);
        let x = match variant {
            EncoderVariant::Blstm => FeatureSequence::new(frames)?,
            EncoderVariant::VggBlstm => FeatureSequence::with_deltas(frames)?,
        };
        let out_len = enc.encode(store.params(), &x)?.len();
        let w = self.tensor(&[out_len, cfg.output_dim()], 1.0);
        check_param_store(name, &mut store, self.eps, |p, g| {
            let (out, cache) = enc.forward(p, &x).expect("encoder forward on valid shapes");
            if let Some(g) = g {
                enc.backward(p, g, &cache, &w);
                self.spoil(Some(g));
            }
            weighted_sum(&w, &out.hidden)
        })
    }

    fn ctc(&mut self) -> Result<f64> {
        let mut worst = 0.0f64;
        for target in [labels(&[1, 2]), labels(&[1, 1]), labels(&[3])] {
            let logits = self.tensor(&[5, 4], 2.0);
            let dims = logits.dims().to_vec();
            let nll = |v: &[f64]| {
                let grid = PosteriorGrid::from_logits(&Tensor::from_vec(&dims, v.to_vec()));
                ctc_loss(&grid, &target).map_or(f64::NAN, |l| l.nll)
            };
            let grid = PosteriorGrid::from_logits(&logits);
            let loss = ctc_loss(&grid, &target)?;
            let mut dz = Vec::with_capacity(logits.len());
            for t in 0..grid.frames() {
                dz.extend(log_softmax_backward(grid.log_probs().row(t), loss.grad.row(t)));
            }
            worst = worst.max(finite_diff_check("ctc", nll, logits.data(), &self.spoil_vec(dz), self.eps)?);
        }
        Ok(worst)
    }

    fn tiny_decoder(&mut self, store: &mut ParamStore, vocab: &Vocab, enc_dim: usize) -> Result<AttentionDecoder> {
        let cfg = DecoderConfig {
            hidden: 3,
            att_dim: 4,
            att_filters: 2,
            att_width: 3,
        };
        AttentionDecoder::new(store, vocab, enc_dim, cfg)
    }

    fn attention_nll(&mut self) -> Result<f64> {
        let vocab = Vocab::letters(3)?;
        let mut store = self.store();
        let dec = self.tiny_decoder(&mut store, &vocab, 2)?;
        self.randomize(&mut store);
        let enc = self.tensor(&[4, 2], 1.0);
        let target = labels(&[1, 3, 1]);
        let none = FusionConfig::none();
        let mut denc_out = Vec::new();
        let p_err = check_param_store("attention-nll", &mut store, self.eps, |p, g| match g {
            Some(g) => {
                let (nll, denc) = dec
                    .attention_nll(p, g, &enc, &target, &none, None, None)
                    .expect("teacher forcing on valid shapes");
                denc_out = denc.into_data();
                self.spoil(Some(g));
                nll
            }
            None => dec.teacher_forced(p, &enc, &target, &none, None).map_or(f64::NAN, |tf| tf.nll),
        })?;
        let params = store.params();
        let e_err = finite_diff_check(
            "attention-nll",
            |v| {
                dec.teacher_forced(params, &Tensor::from_vec(&[4, 2], v.to_vec()), &target, &none, None)
                    .map_or(f64::NAN, |tf| tf.nll)
            },
            enc.data(),
            &self.spoil_vec(denc_out),
            self.eps,
        )?;
        Ok(p_err.max(e_err))
    }

    fn lm_nll(&mut self) -> Result<f64> {
        let vocab = Vocab::letters(3)?;
        let mut store = self.store();
        let lm = RnnLm::new(&mut store, &vocab, 3)?;
        self.randomize(&mut store);
        let text = labels(&[1, 2, 3, 1]);
        check_param_store("lm-nll", &mut store, self.eps, |p, g| {
            let spoil = g.is_some();
            let mut g = g;
            let nll = lm.sequence_nll(p, &text, g.as_deref_mut()).expect("lm on valid labels");
            if spoil {
                self.spoil(g);
            }
            nll
        })
    }

    fn fused(&mut self, fusion: FusionConfig) -> Result<f64> {
        let component = match fusion.mode {
            crate::attdec::FusionMode::Joint => "fused-lm.joint",
            _ => "fused-lm.separate",
        };
        let vocab = Vocab::letters(3)?;
        let mut store = self.store();
        let dec = self.tiny_decoder(&mut store, &vocab, 2)?;
        self.randomize(&mut store);
        let mut lm_store = ParamStore::new(self.seed ^ 0x5bd1_e995);
        let lm = RnnLm::new(&mut lm_store, &vocab, 3)?;
        self.randomize(&mut lm_store);
        let enc = self.tensor(&[4, 2], 1.0);
        let target = labels(&[2, 1, 3]);
        let joint = fusion.mode == crate::attdec::FusionMode::Joint;

        let lm_params = lm_store.params().clone();
        let handle = LmHandle {
            lm: &lm,
            params: &lm_params,
        };
        let mut denc_out = Vec::new();
        let dec_err = check_param_store(component, &mut store, self.eps, |p, g| match g {
            Some(g) => {
                let (nll, denc) = dec
                    .attention_nll(p, g, &enc, &target, &fusion, Some(handle), None)
                    .expect("fused teacher forcing");
                denc_out = denc.into_data();
                self.spoil(Some(g));
                nll
            }
            None => dec
                .teacher_forced(p, &enc, &target, &fusion, Some(handle))
                .map_or(f64::NAN, |tf| tf.nll),
        })?;
        let dec_params = store.params();
        let e_err = finite_diff_check(
            component,
            |v| {
                dec.teacher_forced(dec_params, &Tensor::from_vec(&[4, 2], v.to_vec()), &target, &fusion, Some(handle))
                    .map_or(f64::NAN, |tf| tf.nll)
            },
            enc.data(),
            &self.spoil_vec(denc_out),
            self.eps,
        )?;
        let mut worst = dec_err.max(e_err);
        if joint {
            let mut scratch = Gradients::zeros_like(dec_params);
            let lm_err = check_param_store(component, &mut lm_store, self.eps, |lp, g| {
                let h = LmHandle { lm: &lm, params: lp };
                match g {
                    Some(g) => {
                        let (nll, _) = dec
                            .attention_nll(dec_params, &mut scratch, &enc, &target, &fusion, Some(h), Some(&mut *g))
                            .expect("fused teacher forcing");
                        self.spoil(Some(g));
                        nll
                    }
                    None => dec
                        .teacher_forced(dec_params, &enc, &target, &fusion, Some(h))
                        .map_or(f64::NAN, |tf| tf.nll),
                }
            })?;
            worst = worst.max(lm_err);
        }
        Ok(worst)
    }

    fn mtl(&mut self) -> Result<f64> {
        let vocab = Vocab::letters(3)?;
        let config = ModelConfig {
            vocab,
            encoder: EncoderConfig {
                num_layers: 3,
                hidden: 2,
                proj: 2,
                ..EncoderConfig::blstm(2)
            },
            decoder: DecoderConfig {
                hidden: 3,
                att_dim: 4,
                att_filters: 2,
                att_width: 3,
            },
        };
        let mut model = Model::new(config, self.seed)?;
        self.randomize(model.store_mut());
        let x = FeatureSequence::new(self.tensor(&[12, 2], 1.0))?;
        let target = labels(&[1, 2]);
        let lambda = 0.5;
        let none = FusionConfig::none();
        model.store_mut().zero_grads();
        model.accumulate_gradients(&x, &target, lambda, &none, None, None)?;
        let mut analytic = model.store().grads().clone();
        self.spoil(Some(&mut analytic));
        let probe = model.clone();
        check_against_gradients("mtl", model.store_mut(), &analytic, self.eps, |p| {
            let run = || -> Result<f64> {
                let enc = probe.encoder().encode(p, &x)?;
                let grid = PosteriorGrid::from_logits(&probe.ctc_logits(p, &enc.hidden)?);
                let ctc = ctc_loss(&grid, &target)?.nll;
                let att = probe.decoder().teacher_forced(p, &enc.hidden, &target, &none, None)?.nll;
                Ok(mtl_loss(lambda, ctc, att))
            };
            run().unwrap_or(f64::NAN)
        })
    }
}
