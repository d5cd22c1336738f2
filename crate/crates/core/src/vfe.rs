//! Multi-scale visual backbone with attention-based inter-branch fusion.
//!
//! Three branches run at successively halved resolution: S1 (after the
//! stem), S2 and S3, with channel widths doubling. Each stage applies a
//! residual structure to every live branch and then the stage's fusion
//! events. A fusion resamples its source branches to the destination
//! geometry, flattens channel stacks to `[c, h·w]` matrices and replaces the
//! destination with `softmax(C'·C'ᵀ)·C_dst` (row-wise softmax). Three-branch
//! fusions sum their two sources and may add a linear image of the audio
//! embedding to every row of `C'`. All fusions of a stage read the state as
//! it was before the stage's first fusion.
//!
//! Spatial sizes halve by ceiling (`stride 2, pad 1` convs), so odd sizes
//! such as the 64×36 toy geometry stay consistent: S1 9×16, S2 5×8, S3 3×4.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    S1,
    S2,
    S3,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::S1, Branch::S2, Branch::S3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index() + 1)
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S1" | "s1" => Ok(Branch::S1),
            "S2" | "s2" => Ok(Branch::S2),
            "S3" | "s3" => Ok(Branch::S3),
            other => Err(Error::Config(format!("unknown branch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fusion {
    Two { src: Branch, dst: Branch },
    Three { srcs: [Branch; 2], dst: Branch },
}

impl Fusion {
    pub fn dst(&self) -> Branch {
        match *self {
            Fusion::Two { dst, .. } | Fusion::Three { dst, .. } => dst,
        }
    }

    pub fn sources(&self) -> Vec<Branch> {
        match self {
            Fusion::Two { src, .. } => vec![*src],
            Fusion::Three { srcs, .. } => srcs.to_vec(),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Two { src, dst } => write!(f, "{src}>{dst}"),
            Fusion::Three { srcs, dst } => write!(f, "{}+{}>{dst}", srcs[0], srcs[1]),
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;

    /// `S1>S2` or `S1+S2>S3`.
    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once('>')
            .ok_or_else(|| Error::Config(format!("fusion {s:?} must look like S1>S2 or S1+S2>S3")))?;
        let dst = rhs.parse()?;
        let srcs: Vec<Branch> = lhs.split('+').map(str::parse).collect::<Result<_>>()?;
        match srcs.as_slice() {
            [src] => Ok(Fusion::Two { src: *src, dst }),
            [a, b] => Ok(Fusion::Three { srcs: [*a, *b], dst }),
            _ => Err(Error::Config(format!("fusion {s:?} needs one or two sources"))),
        }
    }
}

/// Fusion events per stage. Stage `k` (0-based) has branches S1..S(k+2).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule(pub Vec<Vec<Fusion>>);

impl Default for Schedule {
    fn default() -> Self {
        use Branch::*;
        let three = vec![
            Fusion::Three { srcs: [S1, S2], dst: S3 },
            Fusion::Three { srcs: [S2, S3], dst: S1 },
            Fusion::Three { srcs: [S1, S3], dst: S2 },
        ];
        Schedule(vec![
            vec![Fusion::Two { src: S1, dst: S2 }, Fusion::Two { src: S2, dst: S1 }],
            three.clone(),
            three,
        ])
    }
}

impl Schedule {
    /// Same number of stages, no fusion events.
    pub fn without_fusion(&self) -> Schedule {
        Schedule(vec![Vec::new(); self.0.len()])
    }
}

impl fmt::Display for Schedule {
    /// Stages separated by `;`, events by `,`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self
            .0
            .iter()
            .map(|st| st.iter().map(Fusion::to_string).collect::<Vec<_>>().join(","))
            .collect();
        write!(f, "{}", stages.join(";"))
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let stages = s
            .split(';')
            .map(|st| {
                st.split(',')
                    .map(str::trim)
                    .filter(|e| !e.is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule(stages))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VfeConfig {
    pub width: usize,
    pub height: usize,
    /// Stride of each of the two stem convolutions (2 normally, 1 in
    /// low-resolution mode).
    pub stem_stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub z: usize,
    /// Widths of S1, S2, S3.
    pub channels: [usize; 3],
    pub merge_channels: usize,
    pub residual_units: usize,
    pub schedule: Schedule,
    pub single_branch: bool,
    /// Whether three-branch fusions add the audio term.
    pub audio_in_fusion: bool,
    pub dropout: f64,
}

impl VfeConfig {
    /// 1024×576, 8×8 grid, widths 32/64/128, Z = 144.
    pub fn full() -> Self {
        VfeConfig {
            width: 1024,
            height: 576,
            stem_stride: 2,
            grid_w: 8,
            grid_h: 8,
            z: 144,
            channels: [32, 64, 128],
            merge_channels: 256,
            residual_units: 4,
            schedule: Schedule::default(),
            single_branch: false,
            audio_in_fusion: true,
            dropout: 0.3,
        }
    }

    /// 128×72 without stem down-sampling, 4×4 grid.
    pub fn low_res() -> Self {
        VfeConfig {
            width: 128,
            height: 72,
            stem_stride: 1,
            grid_w: 4,
            grid_h: 4,
            ..Self::full()
        }
    }

    /// 64×36, 2×2 grid, Z = 36.
    pub fn toy() -> Self {
        VfeConfig {
            width: 64,
            height: 36,
            grid_w: 2,
            grid_h: 2,
            z: 36,
            ..Self::full()
        }
    }

    pub fn patches(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// `(h, w)` of S1, S2, S3 and of the merged map.
    pub fn geometry(&self) -> [(usize, usize); 4] {
        let down = self.stem_stride * self.stem_stride;
        let s1 = (self.height / down, self.width / down);
        let half = |(h, w): (usize, usize)| (h.div_ceil(2), w.div_ceil(2));
        let s2 = half(s1);
        let s3 = half(s2);
        [s1, s2, s3, half(s3)]
    }

    fn branches_at(&self, stage: usize) -> usize {
        if self.single_branch {
            1
        } else {
            (stage + 2).min(3)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let down = self.stem_stride * self.stem_stride;
        if self.stem_stride == 0 || !self.width.is_multiple_of(down) || !self.height.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by {down}, the stem down-sampling factor",
                self.width, self.height
            )));
        }
        if self.channels.contains(&0) || self.merge_channels == 0 || self.z == 0 {
            return Err(Error::Config("channel widths and Z must be positive".into()));
        }
        if !self.single_branch && self.schedule.0.len() < 2 {
            return Err(Error::Config(
                "the three-branch backbone needs at least two stages (S3 appears in stage 2)".into(),
            ));
        }
        if self.schedule.0.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        if !self.single_branch {
            for (k, stage) in self.schedule.0.iter().enumerate() {
                let live = self.branches_at(k);
                for f in stage {
                    let mut seen = vec![f.dst()];
                    for s in f.sources() {
                        if seen.contains(&s) {
                            return Err(Error::Config(format!("fusion {f} repeats a branch")));
                        }
                        seen.push(s);
                    }
                    if let Some(b) = seen.iter().find(|b| b.index() >= live) {
                        return Err(Error::Config(format!(
                            "fusion {f} in stage {} references {b} before it exists",
                            k + 1
                        )));
                    }
                }
            }
        }
        let (mh, mw) = self.geometry()[3];
        if self.grid_h == 0 || self.grid_w == 0 || self.grid_h > mh || self.grid_w > mw {
            return Err(Error::Config(format!(
                "patch grid {}x{} does not fit the {mw}x{mh} merged map",
                self.grid_w, self.grid_h
            )));
        }
        if !self.width.is_multiple_of(self.grid_w) || !self.height.is_multiple_of(self.grid_h) {
            return Err(Error::Config(format!(
                "patch grid {}x{} does not tile {}x{}",
                self.grid_w, self.grid_h, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Core of every fusion: `softmax(C'·C'ᵀ)·C_dst` over `[n, c, hw]` stacks,
/// with `audio_row` (`[n, hw]`) added to every row of `C'` first.
/// Returns the fused stack and the attention matrix `[n, c, c]`.
pub fn fuse_attention<'t>(
    combined: &Var<'t>,
    dst: &Var<'t>,
    audio_row: Option<&Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let c = match audio_row {
        Some(row) => combined.add_rows(row)?,
        None => combined.clone(),
    };
    let aw = c.matmul(&c.transpose()?)?.softmax(c.shape().len() - 1)?;
    Ok((aw.matmul(dst)?, aw))
}

/// Four bottleneck units (1×1 → 3×3 → 1×1, width c/4) with identity skips.
#[derive(Clone, Debug)]
pub struct ResidualStructure {
    units: Vec<[ConvBn; 3]>,
}

impl ResidualStructure {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, units: usize) -> Self {
        let mid = (channels / 4).max(1);
        let units = (0..units)
            .map(|u| {
                let n = format!("{name}.unit{u}");
                [
                    ConvBn::new(store, &format!("{n}.reduce"), channels, mid, 1, 1, 0, true),
                    ConvBn::new(store, &format!("{n}.spatial"), mid, mid, 3, 1, 1, true),
                    ConvBn::new(store, &format!("{n}.expand"), mid, channels, 1, 1, 0, false),
                ]
            })
            .collect();
        ResidualStructure { units }
    }

    pub fn final_convs(&self) -> Vec<ParamId> {
        self.units.iter().map(|u| u[2].conv.weight).collect()
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut x = x.clone();
        for [a, b, c] in &self.units {
            let y = a.forward(ctx, &x)?;
            let y = b.forward(ctx, &y)?;
            let y = c.forward(ctx, &y)?;
            x = x.add(&y)?;
        }
        Ok(x)
    }
}

/// Brings one source branch to a destination's geometry and width.
#[derive(Clone, Debug)]
enum Resampler {
    /// Chain of stride-2 3×3 convs, ReLU between steps.
    Down(Vec<ConvBn>),
    /// 1×1 conv to the destination width, then bilinear resize.
    Up(ConvBn),
}

#[derive(Clone, Debug)]
struct FusionBlock {
    fusion: Fusion,
    resamplers: Vec<Resampler>,
    audio: Option<Linear>,
}

/// Outputs of one backbone pass.
pub struct VfeOutput<'t> {
    /// Patch features `[n, P, Z]`, patch `p = gy·gW + gx`.
    pub v: Var<'t>,
    /// Every fusion attention matrix `[n, c, c]`, in evaluation order.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Vfe {
    cfg: VfeConfig,
    stem: [ConvBn; 2],
    transitions: Vec<ConvBn>,
    residual: Vec<Vec<ResidualStructure>>,
    fusions: Vec<Vec<FusionBlock>>,
    merge: ConvBn,
    head: [ConvBn; 2],
}

impl Vfe {
    pub fn new(store: &mut ParamStore, cfg: &VfeConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let s = cfg.stem_stride;
        let stem = [
            ConvBn::new(store, "vfe.stem0", 3, ch[0], 3, s, 1, true),
            ConvBn::new(store, "vfe.stem1", ch[0], ch[0], 3, s, 1, true),
        ];
        let transitions = if cfg.single_branch {
            Vec::new()
        } else {
            (0..2)
                .map(|k| ConvBn::new(store, &format!("vfe.transition{k}"), ch[k], ch[k + 1], 3, 2, 1, true))
                .collect()
        };
        let geom = cfg.geometry();
        let mut residual = Vec::new();
        let mut fusions = Vec::new();
        for (k, stage) in cfg.schedule.0.iter().enumerate() {
            let live = cfg.branches_at(k);
            residual.push(
                (0..live)
                    .map(|b| {
                        let name = format!("vfe.stage{k}.res.s{}", b + 1);
                        ResidualStructure::new(store, &name, ch[b], cfg.residual_units)
                    })
                    .collect(),
            );
            let mut blocks = Vec::new();
            if !cfg.single_branch {
                for (e, f) in stage.iter().enumerate() {
                    let name = format!("vfe.stage{k}.fuse{e}");
                    let d = f.dst().index();
                    let resamplers = f
                        .sources()
                        .iter()
                        .map(|src| {
                            let si = src.index();
                            let n = format!("{name}.from_s{}", si + 1);
                            if si < d {
                                Resampler::Down(
                                    (si..d)
                                        .map(|j| {
                                            let relu = j + 1 < d;
                                            ConvBn::new(store, &format!("{n}.step{}", j - si), ch[j], ch[j + 1], 3, 2, 1, relu)
                                        })
                                        .collect(),
                                )
                            } else {
                                Resampler::Up(ConvBn::new(store, &n, ch[si], ch[d], 1, 1, 0, false))
                            }
                        })
                        .collect();
                    let audio = match f {
                        Fusion::Three { .. } if cfg.audio_in_fusion => {
                            let (h, w) = geom[d];
                            Some(Linear::new(store, &format!("{name}.audio"), cfg.z, h * w))
                        }
                        _ => None,
                    };
                    blocks.push(FusionBlock {
                        fusion: f.clone(),
                        resamplers,
                        audio,
                    });
                }
            }
            fusions.push(blocks);
        }
        let merge_in = if cfg.single_branch { ch[0] } else { ch.iter().sum() };
        let merge = ConvBn::new(store, "vfe.merge", merge_in, cfg.merge_channels, 3, 2, 1, true);
        let head = [
            ConvBn::new(store, "vfe.head0", cfg.merge_channels, cfg.z, 3, 1, 1, true),
            ConvBn::new(store, "vfe.head1", cfg.z, cfg.z, 3, 1, 1, true),
        ];
        Ok(Vfe {
            cfg: cfg.clone(),
            stem,
            transitions,
            residual,
            fusions,
            merge,
            head,
        })
    }

    pub fn config(&self) -> &VfeConfig {
        &self.cfg
    }

    pub fn residual_structure(&self, stage: usize, branch: Branch) -> &ResidualStructure {
        &self.residual[stage][branch.index()]
    }

    /// `[n, 3, H, W]` → S1.
    pub fn stem<'t>(&self, ctx: &mut Ctx<'t, '_>, image: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, h, w) = image.value().nchw("stem")?;
        if c != 3 || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::Input(format!(
                "image {c}x{h}x{w} does not match configured 3x{}x{}",
                self.cfg.height, self.cfg.width
            )));
        }
        let x = self.stem[0].forward(ctx, image)?;
        self.stem[1].forward(ctx, &x)
    }

    /// Creates S2 (`k = 0`) from S1 or S3 (`k = 1`) from S2.
    pub fn transition<'t>(&self, ctx: &mut Ctx<'t, '_>, k: usize, x: &Var<'t>) -> Result<Var<'t>> {
        self.transitions[k].forward(ctx, x)
    }

    pub fn residual<'t>(&self, ctx: &mut Ctx<'t, '_>, stage: usize, branch: Branch, x: &Var<'t>) -> Result<Var<'t>> {
        self.residual[stage][branch.index()].forward(ctx, x)
    }

    fn resample<'t>(&self, ctx: &mut Ctx<'t, '_>, r: &Resampler, x: &Var<'t>, dst: Branch) -> Result<Var<'t>> {
        match r {
            Resampler::Down(steps) => {
                let mut y = x.clone();
                for s in steps {
                    y = s.forward(ctx, &y)?;
                }
                Ok(y)
            }
            Resampler::Up(proj) => {
                let (h, w) = self.cfg.geometry()[dst.index()];
                proj.forward(ctx, x)?.resize_bilinear(h, w)
            }
        }
    }

    fn fuse<'t>(
        &self,
        ctx: &mut Ctx<'t, '_>,
        block: &FusionBlock,
        state: &[Option<Var<'t>>; 3],
        audio: Option<&Var<'t>>,
    ) -> Result<(Var<'t>, Tensor)> {
        let dst_b = block.fusion.dst();
        let dst = state[dst_b.index()].as_ref().expect("validated schedule");
        let (n, c, h, w) = dst.value().nchw("fuse")?;
        let mut combined: Option<Var<'t>> = None;
        for (src, r) in block.fusion.sources().iter().zip(&block.resamplers) {
            let x = state[src.index()].as_ref().expect("validated schedule");
            let y = self.resample(ctx, r, x, dst_b)?;
            combined = Some(match combined {
                Some(acc) => acc.add(&y)?,
                None => y,
            });
        }
        let combined = combined.expect("at least one source").reshape([n, c, h * w])?;
        let row = match &block.audio {
            Some(lin) => {
                let a = audio.ok_or_else(|| Error::Input("fusion expects an audio embedding".into()))?;
                let row = lin.forward(ctx, a)?;
                Some(ctx.dropout(&row, self.cfg.dropout)?)
            }
            None => None,
        };
        let flat_dst = dst.reshape([n, c, h * w])?;
        let (out, aw) = fuse_attention(&combined, &flat_dst, row.as_ref())?;
        Ok((out.reshape([n, c, h, w])?, aw.value().clone()))
    }

    /// Pools every branch to S3 geometry, concatenates, and reduces to the
    /// merged map (stride 2).
    pub fn merge<'t>(&self, ctx: &mut Ctx<'t, '_>, branches: &[Var<'t>]) -> Result<Var<'t>> {
        let (h3, w3) = self.cfg.geometry()[2];
        let pooled = branches
            .iter()
            .map(|b| {
                let (_, _, h, w) = b.value().nchw("merge")?;
                if (h, w) == (h3, w3) {
                    Ok(b.clone())
                } else {
                    b.adaptive_avg_pool2d(h3, w3)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let x = if pooled.len() == 1 {
            pooled[0].clone()
        } else {
            Var::concat_channels(&pooled)?
        };
        self.merge.forward(ctx, &x)
    }

    /// Merged map → `[n, P, Z]`.
    pub fn head<'t>(&self, ctx: &mut Ctx<'t, '_>, merged: &Var<'t>) -> Result<Var<'t>> {
        let x = self.head[0].forward(ctx, merged)?;
        let x = self.head[1].forward(ctx, &x)?;
        let x = x.adaptive_avg_pool2d(self.cfg.grid_h, self.cfg.grid_w)?;
        let n = x.shape()[0];
        x.reshape([n, self.cfg.z, self.cfg.patches()])?.transpose()
    }

    /// `image` is `[n, 3, H, W]`; `audio` is `[n, Z]` and required when the
    /// schedule has audio-integrated fusions.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, image: &Var<'t>, audio: Option<&Var<'t>>) -> Result<VfeOutput<'t>> {
        let image = if image.shape().len() == 3 {
            let s = image.shape().to_vec();
            image.reshape([1, s[0], s[1], s[2]])?
        } else {
            image.clone()
        };
        let mut state: [Option<Var<'t>>; 3] = [Some(self.stem(ctx, &image)?), None, None];
        let mut attention = Vec::new();
        for (k, blocks) in self.fusions.iter().enumerate() {
            if !self.cfg.single_branch && k < 2 {
                let src = state[k].clone().expect("branch exists");
                state[k + 1] = Some(self.transition(ctx, k, &src)?);
            }
            for (b, slot) in state.iter_mut().enumerate() {
                if let Some(x) = slot.as_ref() {
                    *slot = Some(self.residual[k][b].forward(ctx, x)?);
                }
            }
            let mut updates = Vec::new();
            for block in blocks {
                let (out, aw) = self.fuse(ctx, block, &state, audio)?;
                updates.push((block.fusion.dst(), out));
                attention.push(aw);
            }
            for (dst, out) in updates {
                state[dst.index()] = Some(out);
            }
        }
        let branches: Vec<Var<'t>> = state.into_iter().flatten().collect();
        let merged = self.merge(ctx, &branches)?;
        Ok(VfeOutput {
            v: self.head(ctx, &merged)?,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn schedule_round_trips_through_text() {
        let s = Schedule::default();
        assert_eq!(s.to_string(), "S1>S2,S2>S1;S1+S2>S3,S2+S3>S1,S1+S3>S2;S1+S2>S3,S2+S3>S1,S1+S3>S2");
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert_eq!(";".parse::<Schedule>().unwrap(), Schedule(vec![vec![], vec![]]));
    }

    #[test]
    fn geometry_halves_by_ceiling() {
        assert_eq!(VfeConfig::toy().geometry(), [(9, 16), (5, 8), (3, 4), (2, 2)]);
        assert_eq!(VfeConfig::full().geometry(), [(144, 256), (72, 128), (36, 64), (18, 32)]);
        assert_eq!(VfeConfig::low_res().geometry(), [(72, 128), (36, 64), (18, 32), (9, 16)]);
    }

    #[test]
    fn indivisible_image_names_divisor() {
        let cfg = VfeConfig { width: 66, ..VfeConfig::toy() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible by 4"), "{msg}");
    }

    #[test]
    fn fusion_before_branch_exists_is_rejected() {
        let mut cfg = VfeConfig::toy();
        cfg.schedule = "S1+S2>S3;".parse().unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("S3 before it exists"), "{msg}");
        cfg.schedule = "S1>S1;".parse().unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_logits_give_channel_mean() {
        let tape = Tape::no_grad();
        let comb = tape.constant(Tensor::zeros([1, 3, 4]));
        let dst = tape.constant(Tensor::from_fn([1, 3, 4], |i| i as f64));
        let (out, aw) = fuse_attention(&comb, &dst, None).unwrap();
        assert!(aw.value().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        for c in 0..3 {
            for j in 0..4 {
                let mean = (j + (4 + j) + (8 + j)) as f64 / 3.0;
                assert!((out.value().at(&[0, c, j]) - mean).abs() < 1e-12);
            }
        }
    }
}
