//! Co-attention density head, density-map losses and exports.
//!
//! `DM_PRE = softmax(AV_ATTD · A_EXTD) · V` with `A_EXTD = A·1ᵀ` (`Z×P`), or
//! `Vᵀ` without audio. Each row of `DM_PRE` becomes a `z_h × z_w` tile at
//! its patch's grid cell; the tiled coarse map is bilinearly resized to the
//! image size.
//!
//! With `A_EXTD = A·1ᵀ` every logit row is constant (`AV_ATTD(i)·A` repeated
//! `P` times), so the row-wise softmax is uniform and each `DM_PRE` row is
//! the column mean of `V`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// `(DM_PRE, attention)`; both `[n, P, ·]`.
pub fn ccm_forward<'t>(av_attd: &Var<'t>, a: Option<&Var<'t>>, v: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let [n, p, z] = *v.shape() else {
        return Err(Error::Input(format!("V must be [n, P, Z], got {:?}", v.shape())));
    };
    if av_attd.shape() != v.shape() {
        return Err(Error::shape("ccm_forward", av_attd.shape(), v.shape()));
    }
    let extd = match a {
        Some(a) => {
            let ones = v.tape().constant(Tensor::ones([n, 1, p]));
            a.reshape([n, z, 1])?.matmul(&ones)?
        }
        None => v.transpose()?,
    };
    let att = av_attd.matmul(&extd)?.softmax(2)?;
    Ok((att.matmul(v)?, att))
}

/// Placement of `P × Z` head outputs on the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileLayout {
    pub grid_w: usize,
    pub grid_h: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub width: usize,
    pub height: usize,
}

impl TileLayout {
    pub fn coarse(&self) -> (usize, usize) {
        (self.grid_h * self.tile_h, self.grid_w * self.tile_w)
    }

    /// Integer up-sampling factors `(fy, fx)`.
    pub fn factors(&self) -> (usize, usize) {
        let (ch, cw) = self.coarse();
        (self.height / ch, self.width / cw)
    }

    pub fn validate(&self, z: usize) -> Result<()> {
        if self.tile_w * self.tile_h != z {
            return Err(Error::Config(format!(
                "Z = {z} does not factor into {}x{} tiles",
                self.tile_w, self.tile_h
            )));
        }
        let (ch, cw) = self.coarse();
        if ch == 0 || cw == 0 || !self.height.is_multiple_of(ch) || !self.width.is_multiple_of(cw) {
            return Err(Error::Config(format!(
                "coarse map {cw}x{ch} does not up-sample to {}x{} by integer factors",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Source index in `[n, P, Z]` for every coarse-map cell, `[n, ch, cw]`.
    fn tile_index(&self, n: usize) -> Vec<usize> {
        let (ch, cw) = self.coarse();
        let p = self.grid_w * self.grid_h;
        let z = self.tile_w * self.tile_h;
        let mut index = Vec::with_capacity(n * ch * cw);
        for s in 0..n {
            for y in 0..ch {
                let (gy, ty) = (y / self.tile_h, y % self.tile_h);
                for x in 0..cw {
                    let (gx, tx) = (x / self.tile_w, x % self.tile_w);
                    let patch = gy * self.grid_w + gx;
                    index.push((s * p + patch) * z + ty * self.tile_w + tx);
                }
            }
        }
        index
    }
}

/// `[n, P, Z]` → density maps `[n, H, W]`.
pub fn head_to_density<'t>(dm_pre: &Var<'t>, layout: &TileLayout) -> Result<Var<'t>> {
    let [n, p, z] = *dm_pre.shape() else {
        return Err(Error::Input(format!("DM_PRE must be [n, P, Z], got {:?}", dm_pre.shape())));
    };
    layout.validate(z)?;
    if p != layout.grid_w * layout.grid_h {
        return Err(Error::shape("head_to_density", dm_pre.shape(), &[layout.grid_h, layout.grid_w]));
    }
    let (ch, cw) = layout.coarse();
    let coarse = dm_pre.gather([n, 1, ch, cw], Arc::new(layout.tile_index(n)))?;
    coarse
        .resize_bilinear(layout.height, layout.width)?
        .reshape([n, layout.height, layout.width])
}

/// `Σ (dm − gt)²` per map, averaged over the batch.
pub fn loss_dm<'t>(dm: &Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    if dm.shape() != gt.shape() {
        return Err(Error::shape("loss_dm", dm.shape(), gt.shape()));
    }
    let n = if dm.shape().len() == 3 { dm.shape()[0] } else { 1 };
    let diff = dm.sub(&dm.tape().constant(gt.clone()))?;
    diff.mul(&diff)?.sum()?.scale(1.0 / n as f64)
}

/// The three loss terms and their sum. Ablated terms are `None` and count
/// as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub pir: Option<f64>,
    pub pce: Option<f64>,
    pub dm: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(pir: Option<f64>, pce: Option<f64>, dm: f64) -> Result<Self> {
        for (name, v) in [("Loss_PIR", pir), ("Loss_PCE", pce), ("Loss_DM", Some(dm))] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Divergence(format!("{name} is {v}")));
                }
            }
        }
        Ok(LossReport {
            pir,
            pce,
            dm,
            total: pir.unwrap_or(0.0) + pce.unwrap_or(0.0) + dm,
        })
    }
}

/// Sum of a loss vector's present terms, as a tape value. Summed as
/// `(PIR + PCE) + DM`, the order of [`LossReport::total`], so both agree
/// bit for bit.
pub fn total_loss<'t>(pir: Option<&Var<'t>>, pce: Option<&Var<'t>>, dm: &Var<'t>) -> Result<(Var<'t>, LossReport)> {
    let report = LossReport::new(pir.map(Var::item), pce.map(Var::item), dm.item())?;
    let aux = match (pir, pce) {
        (Some(a), Some(b)) => Some(a.add(b)?),
        (a, b) => a.or(b).cloned(),
    };
    let total = match aux {
        Some(a) => a.add(dm)?,
        None => dm.clone(),
    };
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width`.
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("DensityMap", &[height, width], &[values.len()]));
        }
        Ok(DensityMap { width, height, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] => Self::new(w, h, t.data().to_vec()),
            _ => Err(Error::Input(format!("density map must be [H, W], got {:?}", t.shape()))),
        }
    }

    pub fn count(&self) -> f64 {
        final_count(&self.values)
    }

    /// Magic `DMP1`, u32 width, u32 height, little-endian f32 values.
    pub fn write_dmp(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + 4 * self.values.len());
        bytes.extend_from_slice(b"DMP1");
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_file(path, &bytes)
    }

    pub fn read_dmp(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != b"DMP1" {
            return Err(Error::Input(format!("{}: not a DMP1 file", path.display())));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (w, h) = (word(4), word(8));
        let body = &bytes[12..];
        if body.len() != 4 * w * h {
            return Err(Error::Input(format!("{}: truncated DMP1 body", path.display())));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(w, h, values)
    }

    /// Binary PGM with values mapped linearly from `[min, max]` to `[0, 255]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Estimated count: the sum of all density values.
pub fn final_count(values: &[f64]) -> f64 {
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn toy_layout() -> TileLayout {
        TileLayout {
            grid_w: 2,
            grid_h: 2,
            tile_w: 4,
            tile_h: 9,
            width: 64,
            height: 36,
        }
    }

    #[test]
    fn layouts_and_factors() {
        let full = TileLayout {
            grid_w: 8,
            grid_h: 8,
            tile_w: 16,
            tile_h: 9,
            width: 1024,
            height: 576,
        };
        full.validate(144).unwrap();
        assert_eq!(full.coarse(), (72, 128));
        assert_eq!(full.factors(), (8, 8));
        let low = TileLayout {
            grid_w: 4,
            grid_h: 4,
            width: 128,
            height: 72,
            ..full
        };
        low.validate(144).unwrap();
        assert_eq!(low.coarse(), (36, 64));
        assert_eq!(low.factors(), (2, 2));
        assert_eq!(toy_layout().factors(), (2, 8));
        assert!(toy_layout().validate(35).is_err());
        assert!(TileLayout { tile_w: 5, tile_h: 9, ..toy_layout() }.validate(45).is_err());
    }

    #[test]
    fn tiles_land_on_their_patch() {
        let tape = Tape::no_grad();
        let layout = toy_layout();
        // Patch p holds the constant p + 1.
        let dm_pre = tape.constant(Tensor::from_fn([1, 4, 36], |i| (i / 36 + 1) as f64));
        let coarse = dm_pre.gather([1, 18, 8], Arc::new(layout.tile_index(1))).unwrap();
        assert_eq!(coarse.value().at(&[0, 0, 0]), 1.0);
        assert_eq!(coarse.value().at(&[0, 0, 7]), 2.0);
        assert_eq!(coarse.value().at(&[0, 17, 0]), 3.0);
        assert_eq!(coarse.value().at(&[0, 17, 7]), 4.0);
        // Within patch 0, tile entry (ty, tx) = (1, 2) is z = 1·4 + 2.
        let dm_pre = tape.constant(Tensor::from_fn([1, 4, 36], |i| (i % 36) as f64));
        let coarse = dm_pre.gather([1, 18, 8], Arc::new(layout.tile_index(1))).unwrap();
        assert_eq!(coarse.value().at(&[0, 1, 2]), 6.0);
    }

    #[test]
    fn constant_head_gives_constant_map() {
        let tape = Tape::no_grad();
        let dm = head_to_density(&tape.constant(Tensor::full([1, 4, 36], 0.5)), &toy_layout()).unwrap();
        assert_eq!(dm.shape(), &[1, 36, 64]);
        assert!(dm.value().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!((dm.value().sum() - 0.5 * 64.0 * 36.0).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::no_grad();
        let gt = Tensor::from_fn([1, 36, 64], |i| (i % 7) as f64);
        let dm = tape.constant(gt.clone());
        assert_eq!(loss_dm(&dm, &gt).unwrap().item(), 0.0);
        let shifted = tape.constant(gt.map(|v| v + 1.0));
        assert!((loss_dm(&shifted, &gt).unwrap().item() - 2304.0).abs() < 1e-9);

        let r = LossReport::new(Some(0.1), Some(0.2), 0.3).unwrap();
        assert!((r.total - 0.6).abs() < 1e-15);
        assert!((LossReport::new(None, Some(0.2), 0.3).unwrap().total - 0.5).abs() < 1e-15);
        assert_eq!(LossReport::new(Some(0.0), Some(0.0), 0.0).unwrap().total, 0.0);
        assert!(matches!(LossReport::new(Some(f64::NAN), None, 0.0), Err(Error::Divergence(_))));
    }

    #[test]
    fn uniform_attention_for_zero_inputs() {
        let tape = Tape::no_grad();
        let v = tape.constant(Tensor::from_fn([1, 3, 2], |i| i as f64));
        let zero = tape.constant(Tensor::zeros([1, 3, 2]));
        let a = tape.constant(Tensor::new([1, 2], vec![0.3, -0.7]).unwrap());
        let (dm, att) = ccm_forward(&zero, Some(&a), &v).unwrap();
        assert!(att.value().data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        for r in 0..3 {
            assert!((dm.value().at(&[0, r, 0]) - 2.0).abs() < 1e-12);
            assert!((dm.value().at(&[0, r, 1]) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dumps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = DensityMap::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let path = dir.path().join("m.dmp");
        map.write_dmp(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DMP1");
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(DensityMap::read_dmp(&path).unwrap(), map);
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }
}
