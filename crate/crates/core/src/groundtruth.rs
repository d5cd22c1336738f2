//! Ground-truth construction, count metrics and image degradations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::ccm::DensityMap;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{kernels, Tensor};

pub const KERNEL_SIZE: usize = 15;
pub const KERNEL_SIGMA: f64 = 2.0;

/// Head centres in pixel coordinates, `0 ≤ x < W`, `0 ≤ y < H`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotation {
    pub points: Vec<(f64, f64)>,
}

impl Annotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Annotation { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
                return Err(Error::Input(format!("head point ({x}, {y}) outside {width}x{height}")));
            }
        }
        Ok(())
    }

    /// One `x y` pair per line.
    pub fn to_text(&self) -> String {
        self.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => points.push((x, y)),
                _ => return Err(Error::Input(format!("line {}: expected \"x y\", got {line:?}", i + 1))),
            }
        }
        Ok(Annotation { points })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Unit-mass 15×15 Gaussian, σ = 2, row-major.
pub fn gaussian_kernel() -> &'static [f64] {
    static K: OnceLock<Vec<f64>> = OnceLock::new();
    K.get_or_init(|| {
        let r = (KERNEL_SIZE / 2) as f64;
        let mut k: Vec<f64> = (0..KERNEL_SIZE * KERNEL_SIZE)
            .map(|i| {
                let dy = (i / KERNEL_SIZE) as f64 - r;
                let dx = (i % KERNEL_SIZE) as f64 - r;
                (-(dx * dx + dy * dy) / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp()
            })
            .collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        k
    })
}

/// Sum of unit-mass kernels at each head's pixel. Kernels cut by the
/// border are renormalized over their in-bounds part, so every head adds
/// exactly 1.
pub fn make_gt_density(ann: &Annotation, width: usize, height: usize) -> Result<DensityMap> {
    ann.validate(width, height)?;
    let kernel = gaussian_kernel();
    let r = (KERNEL_SIZE / 2) as isize;
    let mut values = vec![0.0; width * height];
    for &(x, y) in &ann.points {
        let (cx, cy) = (x.floor() as isize, y.floor() as isize);
        let inside = |i: usize| {
            let py = cy + (i / KERNEL_SIZE) as isize - r;
            let px = cx + (i % KERNEL_SIZE) as isize - r;
            (px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height)
                .then(|| py as usize * width + px as usize)
        };
        let mass: f64 = (0..kernel.len()).filter(|&i| inside(i).is_some()).map(|i| kernel[i]).sum();
        for (i, &k) in kernel.iter().enumerate() {
            if let Some(at) = inside(i) {
                values[at] += k / mass;
            }
        }
    }
    DensityMap::new(width, height, values)
}

/// `gw × gh` patches of `patch_w × patch_h` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_w: usize,
    pub patch_h: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, grid_w: usize, grid_h: usize) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || !width.is_multiple_of(grid_w) || !height.is_multiple_of(grid_h) {
            return Err(Error::Config(format!("grid {grid_w}x{grid_h} does not tile {width}x{height}")));
        }
        Ok(PatchGrid {
            grid_w,
            grid_h,
            patch_w: width / grid_w,
            patch_h: height / grid_h,
        })
    }

    pub fn patches(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Patch index `gy·gW + gx`. A coordinate on a shared edge belongs to
    /// the lower-index patch.
    pub fn patch_of(&self, x: f64, y: f64) -> usize {
        let cell = |v: f64, size: usize, count: usize| -> usize {
            if v <= 0.0 {
                0
            } else {
                ((v / size as f64).ceil() as usize).saturating_sub(1).min(count - 1)
            }
        };
        cell(y, self.patch_h, self.grid_h) * self.grid_w + cell(x, self.patch_w, self.grid_w)
    }
}

pub fn make_gt_patch_counts(ann: &Annotation, grid: &PatchGrid) -> Vec<f64> {
    let mut counts = vec![0.0; grid.patches()];
    for &(x, y) in &ann.points {
        counts[grid.patch_of(x, y)] += 1.0;
    }
    counts
}

/// `(MAE, RMSE)` of estimates against truths.
pub fn mae_rmse(estimates: &[f64], truths: &[f64]) -> Result<(f64, f64)> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::Usage(format!(
            "mae_rmse needs equal non-empty inputs, got {} and {}",
            estimates.len(),
            truths.len()
        )));
    }
    let n = estimates.len() as f64;
    let (abs, sq) = estimates
        .iter()
        .zip(truths)
        .fold((0.0, 0.0), |(a, s), (e, c)| (a + (e - c).abs(), s + (e - c) * (e - c)));
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    /// `sigma` in 8-bit pixel units; the applied std is `sigma/255`.
    GaussianNoise { sigma: f64 },
    /// Brightness scaled by `d ~ U[1−R, 1]`, then noise of std `B/255`.
    LowIllumination { r: f64, b: f64 },
    /// Black rectangle covering `⌊OR·W·H⌋` pixels.
    Occlusion { rate: f64 },
    LowResolution { width: usize, height: usize },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Spec(format!("noise sigma {sigma} must be finite and ≥ 0")))
            }
            Degradation::LowIllumination { r, b } if !((0.0..=1.0).contains(&r) && b >= 0.0 && b.is_finite()) => {
                Err(Error::Spec(format!("illumination needs R in [0, 1] and B ≥ 0, got R={r}, B={b}")))
            }
            Degradation::Occlusion { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::Spec(format!("occlusion rate {rate} outside [0, 1]")))
            }
            Degradation::LowResolution { width, height } if width == 0 || height == 0 => {
                Err(Error::Spec("low-resolution target must be non-empty".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            Degradation::LowIllumination { r, b } => write!(f, "illum:{r}:{b}"),
            Degradation::Occlusion { rate } => write!(f, "occlude:{rate}"),
            Degradation::LowResolution { width, height } => write!(f, "lowres:{width}x{height}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    /// `noise:SIGMA`, `illum:R:B`, `occlude:OR` or `lowres:WxH`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::Spec(format!("bad number {t:?} in {s:?}")))
        };
        let d = match parts.as_slice() {
            ["noise", sigma] => Degradation::GaussianNoise { sigma: num(sigma)? },
            ["illum", r, b] => Degradation::LowIllumination { r: num(r)?, b: num(b)? },
            ["occlude", rate] => Degradation::Occlusion { rate: num(rate)? },
            ["lowres", size] => {
                let (w, h) = size
                    .split_once('x')
                    .ok_or_else(|| Error::Spec(format!("expected WxH in {s:?}")))?;
                let dim = |t: &str| t.parse::<usize>().map_err(|_| Error::Spec(format!("bad size in {s:?}")));
                Degradation::LowResolution {
                    width: dim(w)?,
                    height: dim(h)?,
                }
            }
            _ => {
                return Err(Error::Spec(format!(
                    "unknown degradation {s:?}; use noise:S, illum:R:B, occlude:OR or lowres:WxH"
                )))
            }
        };
        d.validate()?;
        Ok(d)
    }
}

/// Rectangle `(w, h)` with `w·h == area` when a divisor pair fits the
/// image, choosing the pair whose aspect is closest to `aspect`; otherwise
/// the closest fitting approximation.
fn occluder_size(area: usize, width: usize, height: usize, aspect: f64) -> (usize, usize) {
    let score = |w: usize, h: usize| ((w as f64 / h as f64) / aspect).ln().abs();
    let exact = (1..=width.min(area))
        .filter(|w| area.is_multiple_of(*w) && area / w <= height)
        .map(|w| (w, area / w))
        .min_by(|a, b| score(a.0, a.1).total_cmp(&score(b.0, b.1)));
    exact.unwrap_or_else(|| {
        let h = ((area as f64 / aspect).sqrt().round() as usize).clamp(1, height);
        let w = area.div_ceil(h).min(width);
        (w, h)
    })
}

/// Applies a degradation to a `[3, H, W]` image with values in `[0, 1]`.
/// Deterministic in `seed`.
pub fn degrade(image: &Tensor, spec: &Degradation, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let [c, h, w] = *image.shape() else {
        return Err(Error::Input(format!("image must be [3, H, W], got {:?}", image.shape())));
    };
    let mut rng = rng_for(seed, "degrade");
    let mut out = image.clone();
    match *spec {
        Degradation::GaussianNoise { sigma } => {
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma / 255.0).expect("valid std");
                for v in out.data_mut() {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        Degradation::LowIllumination { r, b } => {
            let d = 1.0 - r * rng.random::<f64>();
            let noise = (b > 0.0).then(|| Normal::new(0.0, b / 255.0).expect("valid std"));
            for v in out.data_mut() {
                let n = noise.map_or(0.0, |n| n.sample(&mut rng));
                *v = (*v * d + n).clamp(0.0, 1.0);
            }
        }
        Degradation::Occlusion { rate } => {
            let area = (rate * (w * h) as f64).floor() as usize;
            if area > 0 {
                let aspect = 0.5 * 4f64.powf(rng.random::<f64>());
                let (rw, rh) = occluder_size(area, w, h, aspect);
                let x0 = rng.random_range(0..=w - rw);
                let y0 = rng.random_range(0..=h - rh);
                let data = out.data_mut();
                for ch in 0..c {
                    for y in y0..y0 + rh {
                        data[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + rw].fill(0.0);
                    }
                }
            }
        }
        Degradation::LowResolution { width, height } => {
            let data = kernels::resize_bilinear_forward(c, h, w, height, width, image.data());
            out = Tensor::new([c, height, width], data)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_assignment_examples() {
        let grid = PatchGrid::new(1024, 576, 8, 8).unwrap();
        assert_eq!(grid.patch_w, 128);
        assert_eq!(grid.patch_of(130.0, 10.0), 1);
        assert_eq!(grid.patch_of(128.0, 10.0), 0);
        assert_eq!(grid.patch_of(128.5, 72.0), 1);
        assert_eq!(grid.patch_of(1023.9, 575.9), 63);
        assert_eq!(grid.patch_of(0.0, 0.0), 0);
    }

    #[test]
    fn metric_example() {
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!(mae, 3.0);
        assert!((rmse - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert!(mae_rmse(&[], &[]).is_err());
    }

    #[test]
    fn single_centered_head() {
        let map = make_gt_density(&Annotation::new(vec![(32.0, 18.0)]), 64, 36).unwrap();
        assert!((map.count() - 1.0).abs() < 1e-12);
        let argmax = (0..map.values.len()).max_by(|&a, &b| map.values[a].total_cmp(&map.values[b])).unwrap();
        assert_eq!(argmax, 18 * 64 + 32);
        assert!(make_gt_density(&Annotation::new(vec![(64.0, 0.0)]), 64, 36).is_err());
    }

    #[test]
    fn occluder_sizes_are_exact_when_possible() {
        assert_eq!(occluder_size(1152, 64, 36, 1.0).0 * occluder_size(1152, 64, 36, 1.0).1, 1152);
        let (w, h) = occluder_size(2304, 64, 36, 0.5);
        assert_eq!((w, h), (64, 36));
        // 1151 is prime and wider than the image: approximate.
        let (w, h) = occluder_size(1151, 64, 36, 1.0);
        assert!(w <= 64 && h <= 36);
    }

    #[test]
    fn degradation_specs_parse_and_validate() {
        assert_eq!("noise:25".parse::<Degradation>().unwrap(), Degradation::GaussianNoise { sigma: 25.0 });
        assert_eq!(
            "lowres:128x72".parse::<Degradation>().unwrap(),
            Degradation::LowResolution { width: 128, height: 72 }
        );
        assert!("noise:-1".parse::<Degradation>().is_err());
        assert!("occlude:1.5".parse::<Degradation>().is_err());
        assert!("blur:3".parse::<Degradation>().is_err());
        let s = Degradation::LowIllumination { r: 0.2, b: 25.0 };
        assert_eq!(s.to_string().parse::<Degradation>().unwrap(), s);
    }
}
