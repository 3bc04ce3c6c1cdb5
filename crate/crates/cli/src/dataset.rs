//! Train/dev/test splits: generated from the toy task or read from containers
//! holding `utt.{i}.features` (frames × D) and `utt.{i}.labels` (label ids).

use std::path::Path;

use e2ea_core::train::{generate_toy_dataset, speed_augment};
use e2ea_core::{Error, FeatureSequence, Label, Tensor, Utterance, Vocab};

use crate::checkpoint::{Container, FormatError};
use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub fn to_container(data: &[Utterance]) -> Container {
    let mut c = Container::default();
    for (i, u) in data.iter().enumerate() {
        c.push(format!("utt.{i}.features"), u.features.frames.clone());
        let ids = u.labels.iter().map(|l| l.id() as f64).collect::<Vec<_>>();
        c.push(format!("utt.{i}.labels"), Tensor::from_vec(&[ids.len()], ids));
    }
    c
}

pub fn from_container(c: &Container, vocab: &Vocab, feat_dim: usize, with_deltas: bool) -> Result<Vec<Utterance>, CliError> {
    let n = c.tensors.len() / 2;
    if c.tensors.len() % 2 != 0 || n == 0 {
        return Err(FormatError::Malformed { field: "utterance table" }.into());
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let frames = c.require(&format!("utt.{i}.features"))?.clone();
        if frames.dims().len() != 2 || frames.cols() != feat_dim {
            return Err(Error::Config(format!(
                "utterance {i}: features must be frames x {feat_dim}, got {:?}",
                frames.dims()
            ))
            .into());
        }
        let labels = c
            .require(&format!("utt.{i}.labels"))?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(Label(v as u32))
                } else {
                    Err(FormatError::Malformed { field: "labels" })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        vocab.check_target(&labels)?;
        let features = if with_deltas {
            FeatureSequence::with_deltas(frames)?
        } else {
            FeatureSequence::new(frames)?
        };
        out.push(Utterance { features, labels });
    }
    Ok(out)
}

fn with_channels(data: Vec<Utterance>) -> Result<Vec<Utterance>, CliError> {
    data.into_iter()
        .map(|u| {
            Ok(Utterance {
                features: FeatureSequence::with_deltas(u.features.frames)?,
                labels: u.labels,
            })
        })
        .collect()
}

fn split(cfg: &RunConfig, path: Option<&Path>, n: usize, seed: u64) -> Result<Vec<Utterance>, CliError> {
    let deltas = cfg.needs_deltas();
    match path {
        Some(p) => from_container(&Container::load(p)?, &cfg.task.vocab()?, cfg.task.feat_dim, deltas),
        None => {
            let data = generate_toy_dataset(&cfg.task, n, seed)?;
            if deltas {
                with_channels(data)
            } else {
                Ok(data)
            }
        }
    }
}

/// Loads or generates all three splits; speed perturbation applies to train only.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let d = &cfg.data;
    let train = split(cfg, d.train_path.as_deref(), d.train_utts, d.train_seed)?;
    let factors: Vec<f64> = d.speed_perturb.iter().copied().filter(|&f| f != 1.0).collect();
    let train = if factors.is_empty() {
        train
    } else {
        let mut aug = speed_augment(&train, &factors, cfg.needs_deltas())?;
        if !d.speed_perturb.contains(&1.0) {
            aug.drain(..train.len());
        }
        aug
    };
    Ok(Splits {
        train,
        dev: split(cfg, d.dev_path.as_deref(), d.dev_utts, d.dev_seed)?,
        test: split(cfg, d.test_path.as_deref(), d.test_utts, d.test_seed)?,
    })
}

pub fn load_test(cfg: &RunConfig) -> Result<Vec<Utterance>, CliError> {
    let d = &cfg.data;
    split(cfg, d.test_path.as_deref(), d.test_utts, d.test_seed)
}
