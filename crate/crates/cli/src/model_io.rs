//! Model and LM checkpoints on top of the tensor container.

use std::path::Path;

use e2ea_core::{Error, LanguageModel, Model, ParamStore};

use crate::checkpoint::{scalar, tensor_u64, tensor_usize, u64_tensor, Container};
use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: u32,
}

const META_EPOCH: &str = "meta.epoch";
const META_SEED: &str = "meta.seed";
const META_HASH: &str = "meta.config_hash";

fn push_store(c: &mut Container, store: &ParamStore) {
    for (name, t) in store.params().iter() {
        c.push(name, t.clone());
    }
}

fn push_meta(c: &mut Container, meta: Meta) {
    c.push(META_EPOCH, scalar(meta.epoch as f64));
    c.push(META_SEED, u64_tensor(meta.seed));
    c.push(META_HASH, u64_tensor(meta.config_hash as u64));
}

fn read_meta(c: &Container) -> Result<Meta, CliError> {
    Ok(Meta {
        epoch: tensor_usize(c.require(META_EPOCH)?, "meta.epoch")?,
        seed: tensor_u64(c.require(META_SEED)?, "meta.seed")?,
        config_hash: tensor_u64(c.require(META_HASH)?, "meta.config_hash")? as u32,
    })
}

/// Copies every parameter of `store` out of `c`; tensors outside `prefixes`
/// must be metadata or belong to `store`.
fn fill_store(c: &Container, store: &mut ParamStore, other_prefixes: &[&str]) -> Result<(), CliError> {
    let names: Vec<String> = store.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        store.set(name, c.require(name)?.clone())?;
    }
    for (name, _) in &c.tensors {
        let known = name.starts_with("meta.")
            || other_prefixes.iter().any(|p| name.starts_with(p))
            || names.iter().any(|n| n == name);
        if !known {
            return Err(Error::Config(format!("checkpoint has unexpected tensor `{name}`")).into());
        }
    }
    Ok(())
}

fn check_hash(meta: &Meta, expected: u32, path: &Path) -> Result<(), CliError> {
    if meta.config_hash != expected {
        return Err(Error::Config(format!(
            "{}: checkpoint architecture hash {:#010x} does not match the configuration ({expected:#010x})",
            path.display(),
            meta.config_hash
        ))
        .into());
    }
    Ok(())
}

pub fn lm_hash(cfg: &RunConfig) -> u32 {
    crc32fast::hash(format!("task.vocab_size={}\nlm.hidden={}\n", cfg.task.vocab_size, cfg.lm.hidden).as_bytes())
}

/// The model, plus a jointly trained LM stored under its `lm.` names.
pub fn model_container(model: &Model, joint_lm: Option<&LanguageModel>, meta: Meta) -> Container {
    let mut c = Container::default();
    push_store(&mut c, model.store());
    if let Some(lm) = joint_lm {
        push_store(&mut c, &lm.store);
    }
    push_meta(&mut c, meta);
    c
}

pub fn save_model(path: &Path, model: &Model, joint_lm: Option<&LanguageModel>, meta: Meta) -> Result<(), CliError> {
    model_container(model, joint_lm, meta)
        .save(path)
        .map_err(|e| CliError::io(path, e))
}

pub struct LoadedModel {
    pub model: Model,
    pub joint_lm: Option<LanguageModel>,
    pub meta: Meta,
}

pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<LoadedModel, CliError> {
    let c = Container::load(path)?;
    let meta = read_meta(&c)?;
    check_hash(&meta, cfg.architecture_hash(), path)?;
    let mut model = Model::new(cfg.model_config()?, meta.seed)?;
    fill_store(&c, model.store_mut(), &["lm."])?;
    let joint_lm = if c.get("lm.out.weight").is_some() {
        let mut lm = LanguageModel::new(&cfg.task.vocab()?, cfg.lm.hidden, meta.seed)?;
        fill_store(&c, &mut lm.store, &["enc.", "ctc.", "dec."])?;
        Some(lm)
    } else {
        None
    };
    Ok(LoadedModel { model, joint_lm, meta })
}

pub fn save_lm(path: &Path, lm: &LanguageModel, meta: Meta) -> Result<(), CliError> {
    let mut c = Container::default();
    push_store(&mut c, &lm.store);
    push_meta(&mut c, meta);
    c.save(path).map_err(|e| CliError::io(path, e))
}

pub fn load_lm(path: &Path, cfg: &RunConfig) -> Result<LanguageModel, CliError> {
    let c = Container::load(path)?;
    let meta = read_meta(&c)?;
    check_hash(&meta, lm_hash(cfg), path)?;
    let mut lm = LanguageModel::new(&cfg.task.vocab()?, cfg.lm.hidden, meta.seed)?;
    fill_store(&c, &mut lm.store, &[])?;
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse_str(
            "encoder.layers=2\nencoder.hidden=3\nencoder.proj=3\nencoder.subsample=0,1\n\
             decoder.hidden=3\ndecoder.att_dim=3\ndecoder.att_filters=2\ndecoder.att_width=3\nlm.hidden=3\n",
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(cfg.model_config().unwrap(), 5).unwrap();
        let meta = Meta { epoch: 3, seed: 5, config_hash: cfg.architecture_hash() };
        save_model(&path, &model, None, meta).unwrap();
        let loaded = load_model(&path, &cfg).unwrap();
        assert_eq!(loaded.meta, meta);
        assert!(loaded.joint_lm.is_none());
        for ((n1, a), (n2, b)) in model.params().iter().zip(loaded.model.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(cfg.model_config().unwrap(), 5).unwrap();
        save_model(&path, &model, None, Meta { epoch: 0, seed: 5, config_hash: cfg.architecture_hash() }).unwrap();
        let mut other = cfg.clone();
        other.decoder.hidden = 4;
        assert!(matches!(load_model(&path, &other), Err(CliError::Core(Error::Config(_)))));
    }

    #[test]
    fn joint_lm_travels_with_the_model() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(cfg.model_config().unwrap(), 5).unwrap();
        let lm = LanguageModel::new(&cfg.task.vocab().unwrap(), 3, 8).unwrap();
        save_model(&path, &model, Some(&lm), Meta { epoch: 0, seed: 5, config_hash: cfg.architecture_hash() }).unwrap();
        let loaded = load_model(&path, &cfg).unwrap();
        assert_eq!(loaded.joint_lm.unwrap().store.params().iter().count(), lm.store.params().iter().count());
    }
}
