//! The full network: audio embedding, visual backbone, transformer,
//! co-attention head and the multi-task loss, with the ablation switches.

use std::fmt;
use std::str::FromStr;

use crate::audio::{Afe, AfeConfig};
use crate::avt::{self, Avt, AvtConfig, AvtOutput};
use crate::ccm::{self, LossReport, TileLayout};
use crate::error::{Error, Result};
use crate::groundtruth::PatchGrid;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::vfe::{Schedule, Vfe, VfeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Full,
    LowRes,
    Toy,
}

impl Geometry {
    pub fn size(self) -> (usize, usize) {
        match self {
            Geometry::Full => (1024, 576),
            Geometry::LowRes => (128, 72),
            Geometry::Toy => (64, 36),
        }
    }

    pub fn grid(self) -> (usize, usize) {
        match self {
            Geometry::Full => (8, 8),
            Geometry::LowRes => (4, 4),
            Geometry::Toy => (2, 2),
        }
    }

    /// Default `(tile_w, tile_h)`; `Z = tile_w·tile_h`.
    pub fn tile(self) -> (usize, usize) {
        match self {
            Geometry::Full | Geometry::LowRes => (16, 9),
            Geometry::Toy => (4, 9),
        }
    }

    fn vfe(self) -> VfeConfig {
        match self {
            Geometry::Full => VfeConfig::full(),
            Geometry::LowRes => VfeConfig::low_res(),
            Geometry::Toy => VfeConfig::toy(),
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Geometry::Full => "full",
            Geometry::LowRes => "low_res",
            Geometry::Toy => "toy",
        })
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Geometry::Full),
            "low_res" | "low-res" => Ok(Geometry::LowRes),
            "toy" => Ok(Geometry::Toy),
            _ => Err(Error::Config(format!("unknown geometry {s:?} (full, low_res, toy)"))),
        }
    }
}

/// Ablation switches. Each ablation row of the study is one flag; flags
/// compose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags {
    /// Keep the PIR and PCE streams inside the transformer but drop both
    /// of their losses.
    pub no_aux_loss: bool,
    pub no_pir: bool,
    pub no_pce: bool,
    pub no_avt: bool,
    pub no_ccm: bool,
    pub no_audio_in_fusion: bool,
    pub single_branch: bool,
    /// Image-only variant: no audio anywhere.
    pub cc_v: bool,
}

impl Flags {
    pub const NAMES: [&'static str; 8] = [
        "no_aux_loss",
        "no_pir",
        "no_pce",
        "no_avt",
        "no_ccm",
        "no_audio_in_fusion",
        "single_branch",
        "cc_v",
    ];

    pub fn get_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_aux_loss" => &mut self.no_aux_loss,
            "no_pir" => &mut self.no_pir,
            "no_pce" => &mut self.no_pce,
            "no_avt" => &mut self.no_avt,
            "no_ccm" => &mut self.no_ccm,
            "no_audio_in_fusion" => &mut self.no_audio_in_fusion,
            "single_branch" => &mut self.single_branch,
            "cc_v" => &mut self.cc_v,
            _ => return None,
        })
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        let mut copy = *self;
        copy.get_mut(name).map(|b| *b)
    }

    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES.into_iter().filter(|n| self.get(n) == Some(true)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: Geometry,
    /// S1 width; S2, S3 and the merge use 2×, 4× and 8×.
    pub base_channels: usize,
    pub afe_channels: Vec<usize>,
    pub residual_units: usize,
    /// `(tile_w, tile_h)`; `Z` is their product.
    pub tile: (usize, usize),
    pub schedule: Schedule,
    pub dropout: f64,
    pub flags: Flags,
}

impl ModelConfig {
    pub fn new(geometry: Geometry) -> Self {
        ModelConfig {
            geometry,
            base_channels: 32,
            afe_channels: AfeConfig::default().channels,
            residual_units: 4,
            tile: geometry.tile(),
            schedule: Schedule::default(),
            dropout: 0.3,
            flags: Flags::default(),
        }
    }

    pub fn z(&self) -> usize {
        self.tile.0 * self.tile.1
    }

    pub fn uses_audio(&self) -> bool {
        !self.flags.cc_v
    }

    pub fn patches(&self) -> usize {
        let (gw, gh) = self.geometry.grid();
        gw * gh
    }

    pub fn vfe(&self) -> VfeConfig {
        let c = self.base_channels;
        VfeConfig {
            z: self.z(),
            channels: [c, 2 * c, 4 * c],
            merge_channels: 8 * c,
            residual_units: self.residual_units,
            schedule: self.schedule.clone(),
            single_branch: self.flags.single_branch,
            audio_in_fusion: self.uses_audio() && !self.flags.no_audio_in_fusion,
            dropout: self.dropout,
            ..self.geometry.vfe()
        }
    }

    pub fn afe(&self) -> Option<AfeConfig> {
        self.uses_audio().then(|| AfeConfig {
            channels: self.afe_channels.clone(),
            z: self.z(),
            dropout: self.dropout,
        })
    }

    pub fn layout(&self) -> TileLayout {
        let (width, height) = self.geometry.size();
        let (grid_w, grid_h) = self.geometry.grid();
        TileLayout {
            grid_w,
            grid_h,
            tile_w: self.tile.0,
            tile_h: self.tile.1,
            width,
            height,
        }
    }

    pub fn grid(&self) -> PatchGrid {
        let (w, h) = self.geometry.size();
        let (gw, gh) = self.geometry.grid();
        PatchGrid::new(w, h, gw, gh).expect("geometry grids tile their images")
    }

    pub fn validate(&self) -> Result<()> {
        self.vfe().validate()?;
        self.layout().validate(self.z())?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.flags.no_avt && self.flags.no_pir && self.flags.no_pce {
            return Err(Error::Config("no_pir and no_pce together leave the transformer empty; use no_avt".into()));
        }
        Ok(())
    }

    /// Which loss terms are active, as `(pir, pce)`.
    pub fn loss_terms(&self) -> (bool, bool) {
        let f = &self.flags;
        let aux = !f.no_avt && !f.no_aux_loss;
        (aux && !f.no_pir, aux && !f.no_pce)
    }

    /// `Loss_TOTAL = Loss_PIR + Loss_PCE + Loss_DM` with ablated terms removed.
    pub fn loss_formula(&self) -> String {
        let (pir, pce) = self.loss_terms();
        let mut terms = Vec::new();
        if pir {
            terms.push("Loss_PIR");
        }
        if pce {
            terms.push("Loss_PCE");
        }
        terms.push("Loss_DM");
        terms.join(" + ")
    }
}

/// Per-sample training targets, batched.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `[n, H, W]`.
    pub density: Tensor,
    /// `[n, P]` head counts per patch.
    pub patch_counts: Tensor,
}

impl Targets {
    pub fn pir(&self) -> Result<Tensor> {
        let p = *self.patch_counts.shape().last().expect("non-empty");
        let mut out = Vec::with_capacity(self.patch_counts.numel());
        for row in self.patch_counts.data().chunks(p) {
            out.extend(avt::pir_ground_truth(row)?);
        }
        Tensor::new(self.patch_counts.shape().to_vec(), out)
    }
}

pub struct Forward<'t> {
    pub audio: Option<Var<'t>>,
    pub v: Var<'t>,
    pub avt: Option<AvtOutput<'t>>,
    pub dm_pre: Var<'t>,
    /// `[n, H, W]`.
    pub density: Var<'t>,
    /// Every softmax attention matrix of the pass, as `[.., rows, cols]`
    /// tensors whose last axis sums to one.
    pub attention: Vec<Tensor>,
}

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
    /// Samples whose PCE term was skipped for having no heads.
    pub pce_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    afe: Option<Afe>,
    vfe: Vfe,
    avt: Option<Avt>,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let afe = cfg.afe().map(|a| Afe::new(store, &a)).transpose()?;
        let vfe = Vfe::new(store, &cfg.vfe())?;
        let avt = if cfg.flags.no_avt {
            None
        } else {
            Some(Avt::new(
                store,
                AvtConfig {
                    patches: cfg.patches(),
                    z: cfg.z(),
                    pir: !cfg.flags.no_pir,
                    pce: !cfg.flags.no_pce,
                    audio: cfg.uses_audio(),
                },
            )?)
        };
        Ok(Model {
            cfg: cfg.clone(),
            afe,
            vfe,
            avt,
        })
    }

    /// Builds a model with a fresh store.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let model = Model::new(&mut store, cfg)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vfe(&self) -> &Vfe {
        &self.vfe
    }

    pub fn afe(&self) -> Option<&Afe> {
        self.afe.as_ref()
    }

    pub fn avt(&self) -> Option<&Avt> {
        self.avt.as_ref()
    }

    /// `images` is `[n, 3, H, W]`; `lms` is `[n, 64, 96]` and required
    /// unless the model is image-only.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, images: &Tensor, lms: Option<&Tensor>) -> Result<Forward<'t>> {
        let audio = match &self.afe {
            Some(afe) => {
                let lms = lms.ok_or_else(|| Error::Input("audio-visual model needs spectrograms".into()))?;
                let x = ctx.constant(lms.clone());
                Some(afe.forward(ctx, &x)?)
            }
            None => None,
        };
        let image = ctx.constant(images.clone());
        let vis = self.vfe.forward(ctx, &image, audio.as_ref())?;
        let mut attention = vis.attention;
        let v = vis.v;
        let avt = match &self.avt {
            Some(t) => {
                let out = t.forward(ctx, &v, audio.as_ref())?;
                attention.push(out.weights.value().clone());
                Some(out)
            }
            None => None,
        };
        let attended = avt.as_ref().map_or_else(|| v.clone(), |o| o.attended.clone());
        let dm_pre = if self.cfg.flags.no_ccm {
            attended
        } else {
            let (dm_pre, att) = ccm::ccm_forward(&attended, audio.as_ref(), &v)?;
            attention.push(att.value().clone());
            dm_pre
        };
        let density = ccm::head_to_density(&dm_pre, &self.cfg.layout())?;
        Ok(Forward {
            audio,
            v,
            avt,
            dm_pre,
            density,
            attention,
        })
    }

    pub fn loss<'t>(&self, fwd: &Forward<'t>, targets: &Targets) -> Result<LossOutput<'t>> {
        let (use_pir, use_pce) = self.cfg.loss_terms();
        let dm = ccm::loss_dm(&fwd.density, &targets.density)?;
        let mut pce_skipped = 0;
        let (mut pir, mut pce) = (None, None);
        if let Some(out) = &fwd.avt {
            if use_pir {
                let p = out.pir.as_ref().expect("PIR stream present");
                pir = Some(avt::loss_pir(p, &targets.pir()?)?);
            }
            if use_pce {
                let p = out.pce.as_ref().expect("PCE stream present");
                let (l, skipped) = avt::loss_pce(p, &targets.patch_counts)?;
                pce = Some(l);
                pce_skipped = skipped;
            }
        }
        let (total, report) = ccm::total_loss(pir.as_ref(), pce.as_ref(), &dm)?;
        Ok(LossOutput {
            total,
            report,
            pce_skipped,
        })
    }
}
