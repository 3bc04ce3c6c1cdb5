//! Flat `key=value` run configuration with dotted section prefixes.
//!
//! Every key has a default; a file only lists what it overrides. Lines
//! starting with `#` are comments. Unknown and repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use e2ea_core::attdec::DecoderConfig;
use e2ea_core::{
    AdaDeltaConfig, BeamConfig, DecodeMode, EncoderConfig, EncoderVariant, Error, FusionConfig, FusionMode,
    ModelConfig, MtlConfig, Result, ToyTaskSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_utts: usize,
    pub dev_utts: usize,
    pub test_utts: usize,
    pub train_seed: u64,
    pub dev_seed: u64,
    pub test_seed: u64,
    /// Optional on-disk splits written by `gen-data` or an external tool.
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Speed-perturbation factors; `1.0` keeps the original copy.
    pub speed_perturb: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_utts: 300,
            dev_utts: 50,
            test_utts: 50,
            train_seed: 101,
            dev_seed: 303,
            test_seed: 202,
            train_path: None,
            dev_path: None,
            test_path: None,
            speed_perturb: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub hidden: usize,
    pub epochs: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: ToyTaskSpec,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: MtlConfig,
    /// Fusion used while training the attention decoder.
    pub train_fusion: FusionConfig,
    pub adadelta: AdaDeltaConfig,
    pub lm: LmConfig,
    pub decode: BeamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = ToyTaskSpec::default();
        Self {
            seed: 1,
            encoder: EncoderConfig::blstm(task.feat_dim),
            task,
            data: DataConfig::default(),
            decoder: DecoderConfig::default(),
            train: MtlConfig::default(),
            train_fusion: FusionConfig::none(),
            adadelta: AdaDeltaConfig::default(),
            lm: LmConfig::default(),
            decode: BeamConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Every key in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "task.vocab_size",
        "task.feat_dim",
        "task.dur_min",
        "task.dur_max",
        "task.gap",
        "task.noise",
        "task.len_min",
        "task.len_max",
        "task.seed",
        "data.train_utts",
        "data.dev_utts",
        "data.test_utts",
        "data.train_seed",
        "data.dev_seed",
        "data.test_seed",
        "data.train_path",
        "data.dev_path",
        "data.test_path",
        "data.speed_perturb",
        "encoder.variant",
        "encoder.layers",
        "encoder.hidden",
        "encoder.proj",
        "encoder.subsample",
        "encoder.vgg_channels",
        "decoder.hidden",
        "decoder.att_dim",
        "decoder.att_filters",
        "decoder.att_width",
        "train.lambda",
        "train.epochs",
        "train.clip_norm",
        "train.fusion",
        "train.gamma",
        "adadelta.rho",
        "adadelta.eps",
        "lm.hidden",
        "lm.epochs",
        "decode.mode",
        "decode.beam",
        "decode.lambda",
        "decode.fusion",
        "decode.gamma",
        "decode.max_len_ratio",
        "decode.nbest",
    ];

    /// Keys that determine parameter shapes; hashed into checkpoints.
    pub const ARCHITECTURE_KEYS: &'static [&'static str] = &[
        "task.vocab_size",
        "task.feat_dim",
        "encoder.variant",
        "encoder.layers",
        "encoder.hidden",
        "encoder.proj",
        "encoder.subsample",
        "encoder.vgg_channels",
        "decoder.hidden",
        "decoder.att_dim",
        "decoder.att_filters",
        "decoder.att_width",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "task.vocab_size" => self.task.vocab_size.to_string(),
            "task.feat_dim" => self.task.feat_dim.to_string(),
            "task.dur_min" => self.task.dur_min.to_string(),
            "task.dur_max" => self.task.dur_max.to_string(),
            "task.gap" => self.task.gap.to_string(),
            "task.noise" => self.task.noise.to_string(),
            "task.len_min" => self.task.len_min.to_string(),
            "task.len_max" => self.task.len_max.to_string(),
            "task.seed" => self.task.seed.to_string(),
            "data.train_utts" => self.data.train_utts.to_string(),
            "data.dev_utts" => self.data.dev_utts.to_string(),
            "data.test_utts" => self.data.test_utts.to_string(),
            "data.train_seed" => self.data.train_seed.to_string(),
            "data.dev_seed" => self.data.dev_seed.to_string(),
            "data.test_seed" => self.data.test_seed.to_string(),
            "data.train_path" => path_value(&self.data.train_path),
            "data.dev_path" => path_value(&self.data.dev_path),
            "data.test_path" => path_value(&self.data.test_path),
            "data.speed_perturb" => join(&self.data.speed_perturb),
            "encoder.variant" => self.encoder.variant.to_string(),
            "encoder.layers" => self.encoder.num_layers.to_string(),
            "encoder.hidden" => self.encoder.hidden.to_string(),
            "encoder.proj" => self.encoder.proj.to_string(),
            "encoder.subsample" => join(&self.encoder.subsample),
            "encoder.vgg_channels" => join([self.encoder.vgg_channels.0, self.encoder.vgg_channels.1]),
            "decoder.hidden" => self.decoder.hidden.to_string(),
            "decoder.att_dim" => self.decoder.att_dim.to_string(),
            "decoder.att_filters" => self.decoder.att_filters.to_string(),
            "decoder.att_width" => self.decoder.att_width.to_string(),
            "train.lambda" => self.train.lambda.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.fusion" => self.train_fusion.mode.to_string(),
            "train.gamma" => self.train_fusion.gamma.to_string(),
            "adadelta.rho" => self.adadelta.rho.to_string(),
            "adadelta.eps" => self.adadelta.eps.to_string(),
            "lm.hidden" => self.lm.hidden.to_string(),
            "lm.epochs" => self.lm.epochs.to_string(),
            "decode.mode" => self.decode.mode.to_string(),
            "decode.beam" => self.decode.beam_width.to_string(),
            "decode.lambda" => self.decode.lambda.to_string(),
            "decode.fusion" => self.decode.fusion.mode.to_string(),
            "decode.gamma" => self.decode.fusion.gamma.to_string(),
            "decode.max_len_ratio" => self.decode.max_len_ratio.to_string(),
            "decode.nbest" => self.decode.nbest.map(|n| n.to_string()).unwrap_or_default(),
            _ => return None,
        };
        Some(v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "task.vocab_size" => self.task.vocab_size = parse(key, v)?,
            "task.feat_dim" => {
                self.task.feat_dim = parse(key, v)?;
                self.encoder.input_dim = self.task.feat_dim;
            }
            "task.dur_min" => self.task.dur_min = parse(key, v)?,
            "task.dur_max" => self.task.dur_max = parse(key, v)?,
            "task.gap" => self.task.gap = parse(key, v)?,
            "task.noise" => self.task.noise = parse(key, v)?,
            "task.len_min" => self.task.len_min = parse(key, v)?,
            "task.len_max" => self.task.len_max = parse(key, v)?,
            "task.seed" => self.task.seed = parse(key, v)?,
            "data.train_utts" => self.data.train_utts = parse(key, v)?,
            "data.dev_utts" => self.data.dev_utts = parse(key, v)?,
            "data.test_utts" => self.data.test_utts = parse(key, v)?,
            "data.train_seed" => self.data.train_seed = parse(key, v)?,
            "data.dev_seed" => self.data.dev_seed = parse(key, v)?,
            "data.test_seed" => self.data.test_seed = parse(key, v)?,
            "data.train_path" => self.data.train_path = parse_path(v),
            "data.dev_path" => self.data.dev_path = parse_path(v),
            "data.test_path" => self.data.test_path = parse_path(v),
            "data.speed_perturb" => self.data.speed_perturb = parse_list(key, v)?,
            "encoder.variant" => self.encoder.variant = parse(key, v)?,
            "encoder.layers" => self.encoder.num_layers = parse(key, v)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, v)?,
            "encoder.proj" => self.encoder.proj = parse(key, v)?,
            "encoder.subsample" => self.encoder.subsample = parse_list::<usize>(key, v)?.into_iter().collect(),
            "encoder.vgg_channels" => match parse_list::<usize>(key, v)?.as_slice() {
                &[a, b] => self.encoder.vgg_channels = (a, b),
                _ => return Err(Error::Config(format!("`{key}`: expected two channel counts, got `{v}`"))),
            },
            "decoder.hidden" => self.decoder.hidden = parse(key, v)?,
            "decoder.att_dim" => self.decoder.att_dim = parse(key, v)?,
            "decoder.att_filters" => self.decoder.att_filters = parse(key, v)?,
            "decoder.att_width" => self.decoder.att_width = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.fusion" => self.train_fusion.mode = parse::<FusionMode>(key, v)?,
            "train.gamma" => self.train_fusion.gamma = parse(key, v)?,
            "adadelta.rho" => self.adadelta.rho = parse(key, v)?,
            "adadelta.eps" => self.adadelta.eps = parse(key, v)?,
            "lm.hidden" => self.lm.hidden = parse(key, v)?,
            "lm.epochs" => self.lm.epochs = parse(key, v)?,
            "decode.mode" => self.decode.mode = parse::<DecodeMode>(key, v)?,
            "decode.beam" => self.decode.beam_width = parse(key, v)?,
            "decode.lambda" => self.decode.lambda = parse(key, v)?,
            "decode.fusion" => self.decode.fusion.mode = parse::<FusionMode>(key, v)?,
            "decode.gamma" => self.decode.fusion.gamma = parse(key, v)?,
            "decode.max_len_ratio" => self.decode.max_len_ratio = parse(key, v)?,
            "decode.nbest" => self.decode.nbest = if v.is_empty() { None } else { Some(parse(key, v)?) },
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults, then validates.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, one per line, in a form `parse_str` reads back unchanged.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.encoder.input_dim != self.task.feat_dim {
            return Err(Error::Config("encoder input dim must equal task.feat_dim".into()));
        }
        self.encoder.validate()?;
        if self.decoder.hidden == 0 || self.decoder.att_dim == 0 || self.decoder.att_filters == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.decoder.att_width % 2 == 0 {
            return Err(Error::Config(format!(
                "decoder.att_width must be odd, got {}",
                self.decoder.att_width
            )));
        }
        self.train.validate()?;
        self.train_fusion.validate()?;
        self.adadelta.validate()?;
        if self.lm.hidden == 0 {
            return Err(Error::Config("lm.hidden must be positive".into()));
        }
        let d = &self.data;
        for (key, n, path) in [
            ("data.train_utts", d.train_utts, &d.train_path),
            ("data.dev_utts", d.dev_utts, &d.dev_path),
            ("data.test_utts", d.test_utts, &d.test_path),
        ] {
            if n == 0 && path.is_none() {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.data.speed_perturb.is_empty() || self.data.speed_perturb.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("data.speed_perturb needs positive factors".into()));
        }
        self.decode.validate()
    }

    pub fn load(path: &Path) -> std::result::Result<Self, crate::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::io(path, e))?;
        Ok(Self::parse_str(&text)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab: self.task.vocab()?,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        })
    }

    pub fn mtl(&self) -> MtlConfig {
        MtlConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// CRC32 over the architecture keys and values.
    pub fn architecture_hash(&self) -> u32 {
        let mut text = String::new();
        for key in Self::ARCHITECTURE_KEYS {
            let _ = writeln!(text, "{key}={}", self.get(key).expect("listed key"));
        }
        crc32fast::hash(text.as_bytes())
    }

    /// Whether the features fed to the encoder carry Δ/ΔΔ channels.
    pub fn needs_deltas(&self) -> bool {
        self.encoder.variant == EncoderVariant::VggBlstm
    }
}
