use std::io::{BufRead, Write};
use std::path::Path;

use e2ea_core::gradsuite::{run_suite, GradCheckReport, SuiteConfig};
use e2ea_core::train::{lm_perplexity, train_epoch, train_lm_epoch, JointLm};
use e2ea_core::{
    AdaDelta, BeamConfig, CerAccumulator, DecodeMode, EpochStats, Error, FusionConfig, FusionMode, LabelSequence,
    LanguageModel, Model, NBestEntry, Recognizer, Utterance,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{load_splits, load_test, to_container};
use crate::model_io::{lm_hash, load_lm, load_model, save_lm, save_model, Meta};
use crate::CliError;

pub const THREADS_ENV: &str = "E2EA_THREADS";

fn io(path: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(Path::new(path), e)
}

fn lm_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub stats: EpochStats,
    pub dev_cer: f64,
}

/// Corpus CER over greedy attention decodes (beam 1) with the training fusion.
fn greedy_cer(model: &Model, lm: Option<&LanguageModel>, data: &[Utterance], cfg: &RunConfig) -> Result<f64, CliError> {
    let beam = BeamConfig {
        beam_width: 1,
        lambda: 0.0,
        mode: DecodeMode::Attention,
        fusion: cfg.train_fusion,
        max_len_ratio: cfg.decode.max_len_ratio,
        nbest: Some(1),
    };
    let rec = Recognizer::new(model, lm);
    let mut acc = CerAccumulator::default();
    for u in data {
        let best = rec.decode(&model.encode(&u.features)?, &beam)?.best;
        acc.add(&u.labels, &best);
    }
    Ok(acc.cer()?)
}

fn optional_lm(path: Option<&Path>, cfg: &RunConfig) -> Result<Option<LanguageModel>, CliError> {
    path.map(|p| load_lm(p, cfg)).transpose()
}

/// Trains for `train.epochs` epochs, checkpointing after initialization and
/// after every epoch. One stats line per epoch goes to `out`.
pub fn cmd_train(cfg: &RunConfig, ckpt: &Path, lm_ckpt: Option<&Path>, out: &mut dyn Write) -> Result<Vec<EpochRow>, CliError> {
    let splits = load_splits(cfg)?;
    let mut model = Model::new(cfg.model_config()?, cfg.seed)?;
    let mut opt = AdaDelta::new(cfg.adadelta, model.params());
    let fusion = cfg.train_fusion;
    let frozen = match fusion.mode {
        FusionMode::Separate => Some(
            optional_lm(lm_ckpt, cfg)?
                .ok_or_else(|| Error::Config("train.fusion=separate needs a pretrained LM (--lm-ckpt)".into()))?,
        ),
        _ => None,
    };
    let mut joint = match fusion.mode {
        FusionMode::Joint => Some(match optional_lm(lm_ckpt, cfg)? {
            Some(lm) => lm,
            None => LanguageModel::new(&cfg.task.vocab()?, cfg.lm.hidden, lm_seed(cfg.seed))?,
        }),
        _ => None,
    };
    let mut joint_opt = joint.as_ref().map(|lm| AdaDelta::new(cfg.adadelta, lm.store.params()));
    let hash = cfg.architecture_hash();
    let meta = |epoch| Meta { epoch, seed: cfg.seed, config_hash: hash };
    save_model(ckpt, &model, joint.as_ref(), meta(0))?;

    let mtl = cfg.mtl();
    let w = io("stdout");
    writeln!(out, "epoch\tctc_nll\tatt_nll\tmtl\tdev_cer\ttrained\tskipped").map_err(&w)?;
    let mut rows = Vec::with_capacity(mtl.epochs);
    for epoch in 1..=mtl.epochs {
        let joint_lm = match (joint.as_mut(), joint_opt.as_mut()) {
            (Some(lm), Some(optimizer)) => Some(JointLm { lm, optimizer }),
            _ => None,
        };
        let stats = train_epoch(&mut model, &mut opt, &splits.train, &mtl, &fusion, frozen.as_ref(), joint_lm, epoch)?;
        save_model(ckpt, &model, joint.as_ref(), meta(epoch))?;
        let dev_cer = greedy_cer(&model, frozen.as_ref().or(joint.as_ref()), &splits.dev, cfg)?;
        writeln!(
            out,
            "{epoch}\t{:.6}\t{:.6}\t{:.6}\t{dev_cer:.6}\t{}\t{}",
            stats.ctc_nll, stats.att_nll, stats.mtl, stats.trained, stats.skipped
        )
        .map_err(&w)?;
        rows.push(EpochRow { stats, dev_cer });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmRow {
    pub epoch: usize,
    pub train_ppl: f64,
    pub dev_ppl: f64,
}

/// Trains the character LM on the training transcripts only.
pub fn cmd_lm_train(cfg: &RunConfig, lm_ckpt: &Path, out: &mut dyn Write) -> Result<Vec<LmRow>, CliError> {
    let splits = load_splits(cfg)?;
    let text: Vec<LabelSequence> = splits.train.iter().map(|u| u.labels.clone()).collect();
    let dev: Vec<LabelSequence> = splits.dev.iter().map(|u| u.labels.clone()).collect();
    let mut lm = LanguageModel::new(&cfg.task.vocab()?, cfg.lm.hidden, lm_seed(cfg.seed))?;
    let mut opt = AdaDelta::new(cfg.adadelta, lm.store.params());
    let w = io("stdout");
    writeln!(out, "epoch\ttrain_ppl\tdev_ppl").map_err(&w)?;
    let mut rows = Vec::new();
    for epoch in 0..=cfg.lm.epochs {
        if epoch > 0 {
            train_lm_epoch(&mut lm, &mut opt, &text, cfg.train.clip_norm, cfg.seed, epoch)?;
        }
        let row = LmRow {
            epoch,
            train_ppl: lm_perplexity(&lm, &text)?,
            dev_ppl: lm_perplexity(&lm, &dev)?,
        };
        writeln!(out, "{epoch}\t{:.6}\t{:.6}", row.train_ppl, row.dev_ppl).map_err(&w)?;
        rows.push(row);
    }
    let meta = Meta { epoch: cfg.lm.epochs, seed: lm_seed(cfg.seed), config_hash: lm_hash(cfg) };
    save_lm(lm_ckpt, &lm, meta)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CerSummary {
    pub errors: usize,
    pub ref_len: usize,
    pub cer: f64,
}

impl CerSummary {
    fn from_acc(acc: &CerAccumulator) -> Result<Self, CliError> {
        Ok(Self {
            errors: acc.errors,
            ref_len: acc.ref_len,
            cer: acc.cer()?,
        })
    }

    pub fn line(&self) -> String {
        format!("cer\t{}\t{}\t{}", self.cer, self.errors, self.ref_len)
    }
}

pub const RECORD_HEADER: &str = "id\treference\thypothesis\tatt_score\tctc_score\tjoint_score";

fn pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Other(format!("cannot start decode pool: {e}")))
}

/// Decodes the test split; per-utterance records go to `out` in corpus order.
pub fn cmd_decode(cfg: &RunConfig, ckpt: &Path, lm_ckpt: Option<&Path>, out: &mut dyn Write) -> Result<CerSummary, CliError> {
    let beam = &cfg.decode;
    let loaded = load_model(ckpt, cfg)?;
    let lm = match beam.fusion.mode {
        FusionMode::None => None,
        FusionMode::Separate => Some(
            optional_lm(lm_ckpt, cfg)?
                .ok_or_else(|| Error::Config("decode.fusion=separate needs an LM checkpoint (--lm-ckpt)".into()))?,
        ),
        FusionMode::Joint => match (loaded.joint_lm, optional_lm(lm_ckpt, cfg)?) {
            (_, Some(lm)) | (Some(lm), None) => Some(lm),
            (None, None) => {
                return Err(Error::Config("decode.fusion=joint needs a jointly trained LM in the checkpoint".into()).into())
            }
        },
    };
    let model = &loaded.model;
    let test = load_test(cfg)?;
    let rec = Recognizer::new(model, lm.as_ref());
    let decoded = pool()?.install(|| {
        test.par_iter()
            .map(|u| {
                let res = rec.decode(&model.encode(&u.features)?, beam)?;
                Ok::<_, Error>((res.best.clone(), res.nbest.into_iter().next()))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let vocab = model.vocab();
    let w = io("records");
    writeln!(out, "{RECORD_HEADER}").map_err(&w)?;
    let mut acc = CerAccumulator::default();
    for (i, (u, (best, top))) in test.iter().zip(&decoded).enumerate() {
        acc.add(&u.labels, best);
        let (att, ctc, joint) = match top {
            Some(NBestEntry { att_score, ctc_score, joint_score, .. }) => (
                att_score.to_string(),
                ctc_score.map_or_else(|| "NA".to_string(), |c| c.to_string()),
                joint_score.to_string(),
            ),
            None => ("NA".into(), "NA".into(), "NA".into()),
        };
        writeln!(
            out,
            "test-{i:04}\t{}\t{}\t{att}\t{ctc}\t{joint}",
            vocab.decode(&u.labels),
            vocab.decode(best)
        )
        .map_err(&w)?;
    }
    CerSummary::from_acc(&acc)
}

/// Recomputes corpus CER from decode records (reference and hypothesis columns).
pub fn cmd_eval(records: &mut dyn BufRead) -> Result<CerSummary, CliError> {
    let mut acc = CerAccumulator::default();
    for (n, line) in records.lines().enumerate() {
        let line = line.map_err(io("records"))?;
        if line.is_empty() || line.starts_with("id\treference\thypothesis") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(CliError::Other(format!("record line {}: expected at least 3 tab-separated columns", n + 1)));
        }
        let r: Vec<char> = cols[1].chars().collect();
        let h: Vec<char> = cols[2].chars().collect();
        acc.add(&r, &h);
    }
    CerSummary::from_acc(&acc)
}

/// Runs the finite-difference suite; any failing component is an error.
pub fn cmd_gradcheck(seed: u64, corrupt: Option<String>, out: &mut dyn Write) -> Result<Vec<GradCheckReport>, CliError> {
    let reports = run_suite(&SuiteConfig { seed, corrupt, ..SuiteConfig::default() })?;
    let w = io("stdout");
    writeln!(out, "component\tmax_rel_error\tstatus").map_err(&w)?;
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        writeln!(out, "{}\t{:.3e}\t{status}", r.component, r.max_rel_error).map_err(&w)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
    if !failed.is_empty() {
        let detail: Vec<String> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| match &r.failure {
                Some(f) => format!("{}: {f}", r.component),
                None => format!("{}: max relative error {:.3e}", r.component, r.max_rel_error),
            })
            .collect();
        return Err(CliError::GradCheck(detail.join("; ")));
    }
    Ok(reports)
}

/// Writes `train.e2ea`, `dev.e2ea` and `test.e2ea` into `dir`.
pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let splits = load_splits(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, data) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.e2ea"));
        to_container(data).save(&path).map_err(|e| CliError::io(&path, e))?;
        writeln!(out, "{name}\t{}\t{}", data.len(), path.display()).map_err(io("stdout"))?;
    }
    Ok(())
}

/// `--gamma` sets the LM weight and turns on separate fusion if none was configured.
pub fn gamma_override(fusion: &mut FusionConfig, gamma: f64) {
    fusion.gamma = gamma;
    if fusion.mode == FusionMode::None && gamma > 0.0 {
        fusion.mode = FusionMode::Separate;
    }
}
