//! The training loop, its metrics log and checkpoints.
//!
//! Every random choice (shuffling, augmentation, dropout masks) is drawn
//! from one stream seeded by the config, in a fixed order, so a run is a
//! pure function of its config and data.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::groundtruth::{degrade, Degradation};
use crate::model::{Model, Targets};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::{Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::config::{learning_rate, Config};
use super::data::{stack, Dataset};
use super::eval::evaluate;
use super::optim::Adam;

pub const LOG_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.avcc";
/// Scale of the batchnorm that produces `V`; set from `head_gain`.
pub const HEAD_GAMMA: &str = "vfe.head1.bn.gamma";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub loss_pir: Option<f64>,
    pub loss_pce: Option<f64>,
    pub loss_dm: f64,
    pub total: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

impl EpochMetrics {
    pub const COLUMNS: &'static str = "epoch loss_pir loss_pce loss_dm total val_mae val_rmse";

    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"));
        format!(
            "{} {} {} {:.6e} {:.6e} {:.6} {:.6}",
            self.epoch,
            opt(self.loss_pir),
            opt(self.loss_pce),
            self.loss_dm,
            self.total,
            self.val_mae,
            self.val_rmse
        )
    }
}

/// Mean batch losses of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLoss {
    pub pir: Option<f64>,
    pub pce: Option<f64>,
    pub dm: f64,
    pub total: f64,
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: Rng,
    /// Epochs completed.
    pub epoch: usize,
}

/// Turns a numeric failure into a divergence error naming the first
/// non-finite parameter, when there is one.
fn diagnose(err: Error, store: &ParamStore) -> Error {
    match err {
        Error::NonFinite(_) | Error::Divergence(_) => {
            let bad = store.entries().iter().find(|e| !e.value.is_finite()).map(|e| e.name.clone());
            match bad {
                Some(name) => Error::Divergence(format!("{err}; parameter {name} is non-finite")),
                None => Error::Divergence(err.to_string()),
            }
        }
        other => other,
    }
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let (model, mut store) = Model::build(&cfg.model(), cfg.seed)?;
        if let Some(id) = store.find(HEAD_GAMMA) {
            store.get_mut(id).data_mut().fill(cfg.head_gain);
        }
        let adam = Adam::new(&store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            adam,
            rng: rng_for(cfg.seed, "train"),
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint, whose stored config must describe the same
    /// model as `cfg`.
    pub fn resume(cfg: &Config, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let stored = Config::from_text(&ck.config)?;
        if stored.model() != cfg.model() {
            return Err(Error::Checkpoint("checkpoint was trained with a different model configuration".into()));
        }
        ck.restore(&mut t.store, Some(&mut t.adam))?;
        t.rng = ck.rng.restore();
        t.epoch = ck.epoch as usize;
        Ok(t)
    }

    pub fn header(&self) -> String {
        let flags = self.cfg.flags.active();
        let mut s = String::new();
        writeln!(
            s,
            "# geometry={} z={} params={} flags={}",
            self.cfg.geometry,
            self.cfg.model().z(),
            self.store.num_params(),
            if flags.is_empty() { "none".to_string() } else { flags.join(",") }
        )
        .expect("string write");
        writeln!(s, "# loss: Loss_TOTAL = {}", self.cfg.model().loss_formula()).expect("string write");
        writeln!(s, "# {}", EpochMetrics::COLUMNS).expect("string write");
        s
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, &self.adam, self.epoch as u64, &self.rng, &portable_config(&self.cfg))
    }

    fn batch_inputs(&mut self, data: &Dataset, idx: &[usize]) -> Result<(Tensor, Option<Tensor>, Targets)> {
        let mut images = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &data.samples[i];
            let aug = self.cfg.occlusion_aug > 0.0 && self.rng.random_bool(self.cfg.occlusion_aug);
            images.push(if aug {
                let rate = self.rng.random::<f64>();
                degrade(&s.image, &Degradation::Occlusion { rate }, self.rng.random())?
            } else {
                s.image.clone()
            });
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let lms = if self.model.config().uses_audio() {
            let l = idx
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    s.lms.as_ref().ok_or_else(|| Error::Input(format!("{} has no audio loaded", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(stack(&l)?)
        } else {
            None
        };
        let dens: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].density).collect();
        let p = data.samples[idx[0]].patch_counts.len();
        let counts: Vec<f64> = idx.iter().flat_map(|&i| data.samples[i].patch_counts.clone()).collect();
        let targets = Targets {
            density: stack(&dens)?,
            patch_counts: Tensor::new([idx.len(), p], counts)?,
        };
        Ok((stack(&refs)?, lms, targets))
    }

    /// One optimizer step on the given samples; returns the loss report.
    pub fn step(&mut self, data: &Dataset, idx: &[usize], lr: f64) -> Result<crate::ccm::LossReport> {
        let (images, lms, targets) = self.batch_inputs(data, idx)?;
        let dropout_seed: u64 = self.rng.random();
        let (report, grads, updates) = {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &self.store, true, dropout_seed);
            let mut run = || -> Result<_> {
                let fwd = self.model.forward(&mut ctx, &images, lms.as_ref())?;
                let out = self.model.loss(&fwd, &targets)?;
                let g = tape.backward(&out.total)?;
                Ok((out.report, g))
            };
            let (report, g) = run().map_err(|e| diagnose(e, &self.store))?;
            let grads = ctx.param_grads(&g);
            (report, grads, ctx.bn_updates().to_vec())
        };
        self.adam.step(&mut self.store, &grads, lr)?;
        self.store.apply_bn_updates(&updates);
        Ok(report)
    }

    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochLoss> {
        if data.is_empty() {
            return Err(Error::Input(format!("no training samples in {}", data.dir.display())));
        }
        let lr = learning_rate(self.cfg.lr, self.cfg.lr_decay, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = EpochLoss::default();
        let mut batches = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let r = self.step(data, idx, lr)?;
            sum.pir = r.pir.map(|v| sum.pir.unwrap_or(0.0) + v);
            sum.pce = r.pce.map(|v| sum.pce.unwrap_or(0.0) + v);
            sum.dm += r.dm;
            sum.total += r.total;
            batches += 1.0;
        }
        self.epoch += 1;
        Ok(EpochLoss {
            pir: sum.pir.map(|v| v / batches),
            pce: sum.pce.map(|v| v / batches),
            dm: sum.dm / batches,
            total: sum.total / batches,
        })
    }
}

/// The config as stored in checkpoints: paths are dropped so that runs in
/// different directories produce identical files.
pub fn portable_config(cfg: &Config) -> String {
    let mut c = cfg.clone();
    c.data = None;
    c.val_data = None;
    c.out = PathBuf::from("-");
    c.to_text()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub header: String,
    pub metrics: Vec<EpochMetrics>,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub num_params: usize,
    /// Audio files the training and validation loaders opened.
    pub audio_opens: usize,
}

fn load_split(cfg: &Config, dir: &Path) -> Result<Dataset> {
    let m = cfg.model();
    let (w, h) = m.geometry.size();
    Dataset::load(dir, w, h, &m.grid(), m.uses_audio())
}

/// Trains for `cfg.epochs` epochs on `cfg.data`, evaluating on
/// `cfg.val_data` (the training set when unset) after every epoch. Writes
/// the metrics log and the latest checkpoint into `cfg.out`.
pub fn train(cfg: &Config) -> Result<TrainOutcome> {
    let dir = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Usage("training needs a dataset (data=DIR)".into()))?;
    let train_set = load_split(cfg, dir)?;
    let val_set = match &cfg.val_data {
        Some(v) => Some(load_split(cfg, v)?),
        None => None,
    };
    let mut trainer = Trainer::new(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let log_path = cfg.out.join(LOG_FILE);
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let header = trainer.header();
    log.write_all(header.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    let eval_seed = derive_seed(cfg.seed, "eval");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = trainer.train_epoch(&train_set)?;
        let val = val_set.as_ref().unwrap_or(&train_set);
        let report = evaluate(&trainer.model, &trainer.store, val, None, eval_seed, cfg.threads)?;
        let m = EpochMetrics {
            epoch: trainer.epoch,
            loss_pir: loss.pir,
            loss_pce: loss.pce,
            loss_dm: loss.dm,
            total: loss.total,
            val_mae: report.mae,
            val_rmse: report.rmse,
        };
        writeln!(log, "{}", m.log_line()).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        trainer.checkpoint().save(&ck_path)?;
        metrics.push(m);
    }
    if cfg.epochs == 0 {
        trainer.checkpoint().save(&ck_path)?;
    }
    Ok(TrainOutcome {
        header,
        metrics,
        log: log_path,
        checkpoint: ck_path,
        num_params: trainer.store.num_params(),
        audio_opens: train_set.audio_opens + val_set.map_or(0, |v| v.audio_opens),
    })
}
