//! Residual CNN mapping a log-mel spectrogram to the embedding `A`.
//!
//! Each stage halves both axes: a stride-2 3×3 conv (BN, ReLU), a 3×3 conv
//! (BN), and a stride-2 1×1 projection on the skip path, summed and passed
//! through ReLU. Global average pooling and a linear map give `Z` values,
//! followed by dropout.

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Ctx, Linear, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct AfeConfig {
    /// Output width of each residual stage.
    pub channels: Vec<usize>,
    pub z: usize,
    pub dropout: f64,
}

impl Default for AfeConfig {
    fn default() -> Self {
        AfeConfig {
            channels: vec![32, 64, 128],
            z: 144,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    entry: ConvBn,
    second: ConvBn,
    skip: ConvBn,
}

#[derive(Clone, Debug)]
pub struct Afe {
    stages: Vec<Stage>,
    head: Linear,
    dropout: f64,
}

impl Afe {
    pub fn new(store: &mut ParamStore, cfg: &AfeConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) || cfg.z == 0 {
            return Err(Error::Config(format!("invalid AFE widths {:?} / Z {}", cfg.channels, cfg.z)));
        }
        let mut c_in = 1;
        let mut stages = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("afe.stage{i}");
            stages.push(Stage {
                entry: ConvBn::new(store, &format!("{name}.entry"), c_in, c, 3, 2, 1, true),
                second: ConvBn::new(store, &format!("{name}.second"), c, c, 3, 1, 1, false),
                skip: ConvBn::new(store, &format!("{name}.skip"), c_in, c, 1, 2, 0, false),
            });
            c_in = c;
        }
        let head = Linear::new(store, "afe.embed", c_in, cfg.z);
        Ok(Afe {
            stages,
            head,
            dropout: cfg.dropout,
        })
    }

    pub fn first_conv(&self) -> crate::nn::ParamId {
        self.stages[0].entry.conv.weight
    }

    /// `lms` is `[N, 64, 96]` (or `[64, 96]`); returns `A` as `[N, Z]`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, lms: &Var<'t>) -> Result<Var<'t>> {
        let (n, rows, cols) = match *lms.shape() {
            [n, r, c] => (n, r, c),
            [r, c] => (1, r, c),
            _ => return Err(Error::Input(format!("LMS batch must be [N, 64, 96], got {:?}", lms.shape()))),
        };
        let mut x = lms.reshape([n, 1, rows, cols])?;
        for s in &self.stages {
            let main = s.entry.forward(ctx, &x)?;
            let main = s.second.forward(ctx, &main)?;
            let skip = s.skip.forward(ctx, &x)?;
            x = main.add(&skip)?.relu()?;
        }
        let c = x.shape()[1];
        let pooled = x.adaptive_avg_pool2d(1, 1)?.reshape([n, c])?;
        let a = self.head.forward(ctx, &pooled)?;
        ctx.dropout(&a, self.dropout)
    }
}
