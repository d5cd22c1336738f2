//! Audio input: PCM WAV I/O, the log-mel spectrogram, and the audio
//! embedding network.
//!
//! The spectrogram uses fixed conventions: 16 kHz mono input, a periodic
//! Hann window of 400 samples, hop 160, the 201-bin power spectrum, 64
//! triangular HTK-mel bands spanning 0 Hz to Nyquist, and `ln(x + 1e-10)`.
//! One second yields 98 frames; the first 96 are kept, and shorter inputs
//! repeat their last frame.

mod afe;

pub use afe::{Afe, AfeConfig};

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_BINS: usize = WINDOW / 2 + 1;
pub const N_MELS: usize = 64;
pub const N_FRAMES: usize = 96;
pub const FLOOR_EPSILON: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Reads 16-bit signed PCM mono WAV.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Input(format!(
                "{}: {} channels, expected mono",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Input(format!("{}: expected 16-bit integer PCM", path.display())));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Ok(Waveform::new(samples, spec.sample_rate))
    }

    /// Writes 16-bit signed PCM mono WAV; samples are clamped to [−1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other}", path.display())),
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `N_MELS + 2` band edges in Hz; band `m` spans `edges[m]..edges[m+2]`
/// and peaks at `edges[m+1]`.
pub fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(f64::from(SAMPLE_RATE) / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Triangular filterbank, `[N_MELS][N_BINS]` row-major.
pub fn mel_filterbank() -> &'static [f64] {
    static BANK: OnceLock<Vec<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_band_edges();
        let bin_hz = f64::from(SAMPLE_RATE) / WINDOW as f64;
        let mut bank = vec![0.0; N_MELS * N_BINS];
        for m in 0..N_MELS {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                bank[m * N_BINS + k] = up.min(down).max(0.0);
            }
        }
        bank
    })
}

fn hann() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos())
            .collect()
    })
}

/// Log-mel spectrogram, shape `[N_MELS, N_FRAMES]`.
pub fn compute_lms(w: &Waveform) -> Result<Tensor> {
    if w.samples.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            w.sample_rate
        )));
    }
    let available = if w.samples.len() >= WINDOW {
        (w.samples.len() - WINDOW) / HOP + 1
    } else {
        1
    };
    let frames = available.min(N_FRAMES);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW);
    let bank = mel_filterbank();
    let win = hann();
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut power = vec![0.0; N_BINS];
    let mut out = vec![0.0; N_MELS * N_FRAMES];
    for t in 0..frames {
        let start = t * HOP;
        for (n, slot) in buf.iter_mut().enumerate() {
            let s = w.samples.get(start + n).copied().unwrap_or(0.0);
            *slot = Complex::new(s * win[n], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..N_MELS {
            let row = &bank[m * N_BINS..(m + 1) * N_BINS];
            let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            out[m * N_FRAMES + t] = (e + FLOOR_EPSILON).ln();
        }
    }
    for m in 0..N_MELS {
        let last = out[m * N_FRAMES + frames - 1];
        out[m * N_FRAMES + frames..(m + 1) * N_FRAMES].fill(last);
    }
    Tensor::new([N_MELS, N_FRAMES], out)
}

/// Flat dump: magic `LMS1`, u16 rows, u16 cols, then little-endian f32.
pub fn write_lms(lms: &Tensor, path: &Path) -> Result<()> {
    let [rows, cols] = *lms.shape() else {
        return Err(Error::Input(format!("LMS must be 2-D, got {:?}", lms.shape())));
    };
    let mut bytes = Vec::with_capacity(8 + 4 * lms.numel());
    bytes.extend_from_slice(b"LMS1");
    bytes.extend_from_slice(&(rows as u16).to_le_bytes());
    bytes.extend_from_slice(&(cols as u16).to_le_bytes());
    for &v in lms.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_lms(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != b"LMS1" {
        return Err(Error::Input(format!("{}: not an LMS1 file", path.display())));
    }
    let rows = usize::from(u16::from_le_bytes([bytes[4], bytes[5]]));
    let cols = usize::from(u16::from_le_bytes([bytes[6], bytes[7]]));
    let body = &bytes[8..];
    if body.len() != 4 * rows * cols {
        return Err(Error::Input(format!("{}: truncated LMS1 body", path.display())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new([rows, cols], data)
}
