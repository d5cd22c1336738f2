//! On-disk datasets: a `manifest.txt` listing sample stems, each with a
//! binary P6 `.ppm` image, a `.pts` annotation and (for audio-visual runs)
//! a 16 kHz `.wav` clip.

use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::audio::{compute_lms, Waveform};
use crate::error::{Error, Result};
use crate::groundtruth::{degrade, make_gt_density, make_gt_patch_counts, Annotation, Degradation, PatchGrid};
use crate::rng::derive_seed;
use crate::tensor::{kernels, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// Reads a binary or ASCII PNM colour image into `[3, H, W]` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new([3, h, w], (0..3 * h * w).map(|i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    }).collect())
}

/// Writes `[3, H, W]` values in `[0, 1]` as binary P6.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::Input(format!("image must be [3, H, W], got {:?}", image.shape())));
    };
    let d = image.data();
    let bytes: Vec<u8> = (0..h * w)
        .flat_map(|p| (0..3).map(move |c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Maps an image of any size onto `width × height`: aspect-preserving
/// bilinear scaling, then zero padding, centred. Returns the image and the
/// `(scale, dx, dy)` to apply to annotation points.
pub fn fit_image(image: &Tensor, width: usize, height: usize) -> Result<(Tensor, (f64, f64, f64))> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Input(format!("image must be [3, H, W], got {:?}", image.shape())));
    };
    if (w, h) == (width, height) {
        return Ok((image.clone(), (1.0, 0.0, 0.0)));
    }
    let scale = (width as f64 / w as f64).min(height as f64 / h as f64);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, width);
    let sh = ((h as f64 * scale).round() as usize).clamp(1, height);
    let scaled = kernels::resize_bilinear_forward(c, h, w, sh, sw, image.data());
    let (ox, oy) = ((width - sw) / 2, (height - sh) / 2);
    let mut out = Tensor::zeros([c, height, width]);
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..sh {
            let src = &scaled[(ch * sh + y) * sw..(ch * sh + y + 1) * sw];
            let at = (ch * height + y + oy) * width + ox;
            d[at..at + sw].copy_from_slice(src);
        }
    }
    Ok((out, (sw as f64 / w as f64, ox as f64, oy as f64)))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` at the model geometry.
    pub image: Tensor,
    pub annotation: Annotation,
    /// `[64, 96]` log-mel spectrogram; absent for image-only runs.
    pub lms: Option<Tensor>,
    /// `[H, W]` ground-truth density.
    pub density: Tensor,
    pub patch_counts: Vec<f64>,
}

impl Sample {
    pub fn count(&self) -> f64 {
        self.annotation.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<Sample>,
    /// Number of audio files opened while loading.
    pub audio_opens: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().next().expect("non-empty line").to_string())
        .collect())
}

impl Dataset {
    /// Loads every manifest entry, fitting images to `width × height`.
    /// Audio is read only when `with_audio` is set.
    pub fn load(dir: &Path, width: usize, height: usize, grid: &PatchGrid, with_audio: bool) -> Result<Self> {
        let mut samples = Vec::new();
        let mut audio_opens = 0;
        for id in read_manifest(dir)? {
            let raw = read_ppm(&dir.join(format!("{id}.ppm")))?;
            let (image, (s, dx, dy)) = fit_image(&raw, width, height)?;
            let ann = Annotation::read(&dir.join(format!("{id}.pts")))?;
            let annotation = Annotation::new(
                ann.points
                    .iter()
                    .map(|&(x, y)| ((x * s + dx).min(width as f64 - 1e-9), (y * s + dy).min(height as f64 - 1e-9)))
                    .collect(),
            );
            let lms = if with_audio {
                audio_opens += 1;
                Some(compute_lms(&Waveform::read_wav(&dir.join(format!("{id}.wav")))?)?)
            } else {
                None
            };
            let density = make_gt_density(&annotation, width, height)?;
            let density = Tensor::new([height, width], density.values)?;
            let patch_counts = make_gt_patch_counts(&annotation, grid);
            samples.push(Sample {
                id,
                image,
                annotation,
                lms,
                density,
                patch_counts,
            });
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            samples,
            audio_opens,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stacks `[3, H, W]` images (or any equal-shaped tensors) along a new
/// leading axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Input("cannot stack an empty batch".into()))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Writes a copy of the dataset at `src` into `dst` with every image passed
/// through `spec`. Audio, annotations and the manifest are copied as they
/// are; the per-sample seed matches evaluation under the same spec.
pub fn corrupt_dataset(src: &Path, dst: &Path, spec: &Degradation, seed: u64) -> Result<usize> {
    let ids = read_manifest(src)?;
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for id in &ids {
        let image = read_ppm(&src.join(format!("{id}.ppm")))?;
        let out = degrade(&image, spec, derive_seed(seed, &format!("degrade/{id}")))?;
        write_ppm(&out, &dst.join(format!("{id}.ppm")))?;
        for ext in ["wav", "pts"] {
            let (from, to) = (src.join(format!("{id}.{ext}")), dst.join(format!("{id}.{ext}")));
            if from.exists() {
                std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            }
        }
    }
    let from = src.join(MANIFEST);
    let text = std::fs::read_to_string(&from).map_err(|e| Error::io(&from, e))?;
    let to = dst.join(MANIFEST);
    std::fs::write(&to, format!("# corrupted {spec} seed={seed}\n{text}")).map_err(|e| Error::io(&to, e))?;
    Ok(ids.len())
}
