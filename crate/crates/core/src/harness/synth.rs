//! Synthetic crowd scenes: dark head blobs on a lit, textured background,
//! sometimes partly hidden by grey occluders, paired with a crowd-noise
//! recording whose level encodes the head count.
//!
//! Audio law: a band-limited noise bed with RMS exactly
//! `AUDIO_GAIN · ln(1 + count)`, plus one to three distractor tones. The
//! bed is made orthogonal to the tones, so the total RMS is strictly
//! increasing in `count` for a fixed scene seed.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::groundtruth::Annotation;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

use super::data::{write_ppm, MANIFEST};

pub const AUDIO_GAIN: f64 = 0.03;
/// Clip length in samples; enough for 96 spectrogram frames.
pub const AUDIO_SAMPLES: usize = SAMPLE_RATE as usize;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn toy(n: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            count_min: 5,
            count_max: 50,
            width: 64,
            height: 36,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max || self.width < 4 || self.height < 4 {
            return Err(Error::Config(format!(
                "bad generator settings: counts [{}, {}], size {}x{}",
                self.count_min, self.count_max, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &format!("scene/{index}"))
    }
}

pub struct SyntheticScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub waveform: Waveform,
    pub annotation: Annotation,
}

/// Crowd recording for `count` people. `scene_seed` fixes the noise bed
/// and the distractor tones.
pub fn crowd_audio(count: usize, scene_seed: u64) -> Waveform {
    let mut rng = rng_for(scene_seed, "audio");
    let n = AUDIO_SAMPLES;
    let sr = f64::from(SAMPLE_RATE);

    let mut tone = vec![0.0; n];
    for _ in 0..rng.random_range(1..=3) {
        let f = rng.random_range(200.0..4000.0);
        let amp = rng.random_range(0.005..0.03);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (i, t) in tone.iter_mut().enumerate() {
            *t += amp * (2.0 * PI * f * i as f64 / sr + phase).sin();
        }
    }

    // Two cascaded one-pole low-passes give a babble-like spectral tilt.
    let cutoff = rng.random_range(0.15..0.35);
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut bed: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            y1 += cutoff * (x - y1);
            y2 += cutoff * (y1 - y2);
            y2
        })
        .collect();
    let tt: f64 = tone.iter().map(|t| t * t).sum();
    if tt > 0.0 {
        let proj = bed.iter().zip(&tone).map(|(b, t)| b * t).sum::<f64>() / tt;
        bed.iter_mut().zip(&tone).for_each(|(b, t)| *b -= proj * t);
    }
    let rms = (bed.iter().map(|b| b * b).sum::<f64>() / n as f64).sqrt();
    let level = AUDIO_GAIN * (1.0 + count as f64).ln() / rms;
    let samples = bed.iter().zip(&tone).map(|(b, t)| b * level + t).collect();
    Waveform::new(samples, SAMPLE_RATE)
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

/// Renders scene `index` with exactly `count` heads (drawn from the
/// configured range when `None`).
pub fn render_scene(cfg: &SynthConfig, index: usize, count: Option<usize>) -> SyntheticScene {
    let seed = cfg.scene_seed(index);
    let mut rng = rng_for(seed, "image");
    let (w, h) = (cfg.width, cfg.height);
    let count = count.unwrap_or_else(|| rng.random_range(cfg.count_min..=cfg.count_max));
    let scale = w as f64 / 64.0;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.8));
    let (fx, fy) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let gain = rng.random_range(0.6..1.0);
    let (gx, gy) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
    let mut img = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / scale, y as f64 / scale);
            let texture = 0.06 * (fx * u + px).sin() * (fy * v + py).cos() + 0.03 * ((u + v) * 0.9).sin();
            img[y * w + x] = base.map(|b| b + texture);
        }
    }

    let points: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    for &(hx, hy) in &points {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.25));
        let sigma = rng.random_range(0.9..1.4) * scale;
        let reach = (3.0 * sigma).ceil() as isize;
        let (cx, cy) = (hx.floor() as isize, hy.floor() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let d2 = (x as f64 + 0.5 - hx).powi(2) + (y as f64 + 0.5 - hy).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                let p = &mut img[y as usize * w + x as usize];
                *p = lerp(*p, colour, a);
            }
        }
    }

    if rng.random_bool(0.5) {
        let ow = rng.random_range(w / 8..=w / 3);
        let oh = rng.random_range(h / 8..=h / 3);
        let x0 = rng.random_range(0..=w - ow);
        let y0 = rng.random_range(0..=h - oh);
        let grey = rng.random_range(0.3..0.6);
        for y in y0..y0 + oh {
            for x in x0..x0 + ow {
                img[y * w + x] = [grey; 3];
            }
        }
    }

    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let light = gain * (1.0 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5));
            for c in 0..3 {
                data[(c * h + y) * w + x] = (img[y * w + x][c] * light).clamp(0.0, 1.0);
            }
        }
    }

    SyntheticScene {
        image: Tensor::new([3, h, w], data).expect("sized buffer"),
        waveform: crowd_audio(count, seed),
        annotation: Annotation::new(points),
    }
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Writes `cfg.n` scenes (`.ppm`, `.wav`, `.pts`) and the manifest.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::new();
    writeln!(
        manifest,
        "# synthetic n={} count_min={} count_max={} width={} height={} seed={}",
        cfg.n, cfg.count_min, cfg.count_max, cfg.width, cfg.height, cfg.seed
    )
    .expect("string write");
    for i in 0..cfg.n {
        let scene = render_scene(cfg, i, None);
        let name = scene_name(i);
        write_ppm(&scene.image, &out_dir.join(format!("{name}.ppm")))?;
        scene.waveform.write_wav(&out_dir.join(format!("{name}.wav")))?;
        scene.annotation.write(&out_dir.join(format!("{name}.pts")))?;
        writeln!(manifest, "{name} {}", scene.annotation.len()).expect("string write");
    }
    let path = out_dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_level_tracks_count_for_a_fixed_seed() {
        let seed = 17;
        let rms: Vec<f64> = [0, 1, 5, 20, 50].iter().map(|&c| crowd_audio(c, seed).rms()).collect();
        assert!(rms.windows(2).all(|p| p[0] < p[1]), "{rms:?}");
        let quiet = crowd_audio(0, seed).rms();
        let loud = crowd_audio(50, seed).rms();
        let bed = AUDIO_GAIN * 51f64.ln();
        assert!((loud * loud - quiet * quiet - bed * bed).abs() < 1e-9);
    }

    #[test]
    fn requested_count_is_rendered() {
        let cfg = SynthConfig::toy(1, 3);
        let scene = render_scene(&cfg, 0, Some(12));
        assert_eq!(scene.annotation.len(), 12);
        assert_eq!(scene.image.shape(), &[3, 36, 64]);
        assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        scene.annotation.validate(64, 36).unwrap();
    }
}
