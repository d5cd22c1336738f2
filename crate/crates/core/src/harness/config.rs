//! Run configuration: one flat key space shared by the config file, the
//! environment and the command line.
//!
//! Precedence, lowest first: built-in defaults, the `key=value` file,
//! `AVCC_SEED`, explicit overrides (command-line flags).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::AfeConfig;
use crate::error::{Error, Result};
use crate::model::{Flags, Geometry, ModelConfig};
use crate::vfe::Schedule;

pub const SEED_ENV: &str = "AVCC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub geometry: Geometry,
    pub base_channels: usize,
    pub afe_channels: Vec<usize>,
    pub residual_units: usize,
    /// `(tile_w, tile_h)`; the geometry default when unset.
    pub tile: Option<(usize, usize)>,
    pub schedule: Schedule,
    pub dropout: f64,
    pub flags: Flags,
    pub seed: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub threads: usize,
    /// Probability that a training image is occluded by a black rectangle
    /// of uniformly drawn rate. Targets are unchanged.
    pub occlusion_aug: f64,
    /// Initial scale of the batchnorm that produces `V`, and through it of
    /// the density map. 1 is the usual batchnorm initialization; a small
    /// value starts the map near the per-pixel scale of the targets.
    pub head_gain: f64,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            geometry: Geometry::Toy,
            base_channels: 32,
            afe_channels: AfeConfig::default().channels,
            residual_units: 4,
            tile: None,
            schedule: Schedule::default(),
            dropout: 0.3,
            flags: Flags::default(),
            seed: 0,
            lr: 1e-5,
            lr_decay: 0.99,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 500,
            threads: 1,
            occlusion_aug: 0.0,
            head_gain: 1.0,
            data: None,
            val_data: None,
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_tile(key: &str, value: &str) -> Result<(usize, usize)> {
    let (w, h) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key} expects WxH, got {value:?}")))?;
    Ok((parse(key, w)?, parse(key, h)?))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "-").then(|| PathBuf::from(v))
}

impl Config {
    /// Every key accepted by [`Config::set`], in the order [`Config::to_text`]
    /// writes them.
    pub const KEYS: [&'static str; 31] = [
        "geometry",
        "base_channels",
        "afe_channels",
        "residual_units",
        "tile",
        "schedule",
        "dropout",
        "no_aux_loss",
        "no_pir",
        "no_pce",
        "no_avt",
        "no_ccm",
        "no_audio_in_fusion",
        "single_branch",
        "cc_v",
        "seed",
        "lr",
        "lr_decay",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "epochs",
        "threads",
        "occlusion_aug",
        "head_gain",
        "data",
        "val_data",
        "out",
        "z",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let key = key.as_str();
        if let Some(flag) = self.flags.get_mut(key) {
            *flag = parse_bool(key, value)?;
            return Ok(());
        }
        match key {
            "geometry" => self.geometry = value.trim().parse()?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "afe_channels" => self.afe_channels = parse_list(key, value)?,
            "residual_units" => self.residual_units = parse(key, value)?,
            "tile" if value.trim() == "-" => self.tile = None,
            "tile" => self.tile = Some(parse_tile(key, value)?),
            "z" => {
                let z: usize = parse(key, value)?;
                if z != self.model().z() {
                    return Err(Error::Config(format!(
                        "Z={z} disagrees with the tile layout (Z={}); set tile=WxH instead",
                        self.model().z()
                    )));
                }
            }
            "schedule" => self.schedule = value.trim().parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "occlusion_aug" => self.occlusion_aug = parse(key, value)?,
            "head_gain" => self.head_gain = parse(key, value)?,
            "data" => self.data = path_or_none(value),
            "val_data" => self.val_data = path_or_none(value),
            "out" => self.out = PathBuf::from(value.trim()),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Defaults, then `file`, then `seed_env` (the value of `AVCC_SEED`),
    /// then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, seed_env: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        Config::default().resolve_onto(file, seed_env, overrides)
    }

    /// [`Config::resolve`] with `self` in place of the built-in defaults.
    pub fn resolve_onto(self, file: Option<&Path>, seed_env: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = self;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = seed_env {
            cfg.seed = parse(SEED_ENV, seed)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            geometry: self.geometry,
            base_channels: self.base_channels,
            afe_channels: self.afe_channels.clone(),
            residual_units: self.residual_units,
            tile: self.tile.unwrap_or(self.geometry.tile()),
            schedule: self.schedule.clone(),
            dropout: self.dropout,
            flags: self.flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("threads", self.threads),
            ("base_channels", self.base_channels),
            ("residual_units", self.residual_units),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.afe_channels.is_empty() || self.afe_channels.contains(&0) {
            return Err(Error::Config("afe_channels must be a non-empty list of positive widths".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr={} lr_decay={} out of range", self.lr, self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.occlusion_aug) {
            return Err(Error::Config("weight_decay must be ≥ 0 and occlusion_aug in [0, 1]".into()));
        }
        if !(self.head_gain > 0.0 && self.head_gain.is_finite()) {
            return Err(Error::Config(format!("head_gain={} must be positive", self.head_gain)));
        }
        Ok(())
    }

    /// Canonical `key=value` text; [`Config::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let list = self.afe_channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        for key in Self::KEYS {
            let v = match key {
                "geometry" => self.geometry.to_string(),
                "base_channels" => self.base_channels.to_string(),
                "afe_channels" => list.clone(),
                "residual_units" => self.residual_units.to_string(),
                "tile" => self.tile.map_or("-".to_string(), |(w, h)| format!("{w}x{h}")),
                "schedule" => self.schedule.to_string(),
                "dropout" => self.dropout.to_string(),
                "seed" => self.seed.to_string(),
                "lr" => self.lr.to_string(),
                "lr_decay" => self.lr_decay.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "adam_eps" => self.adam_eps.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "threads" => self.threads.to_string(),
                "occlusion_aug" => self.occlusion_aug.to_string(),
                "head_gain" => self.head_gain.to_string(),
                "data" => path(&self.data),
                "val_data" => path(&self.val_data),
                "out" => self.out.display().to_string(),
                "z" => self.model().z().to_string(),
                flag => self.flags.get(flag).expect("flag key").to_string(),
            };
            writeln!(s, "{key}={v}").expect("string write");
        }
        s
    }
}

/// Learning rate at zero-based `epoch`: `lr0 · decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
